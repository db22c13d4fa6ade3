#pragma once

// Central finite differences against the analytic backward passes. The probe
// loss is sum(out * R) for a fixed random R, so every output cell contributes
// with its own weight.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "crowdx/network.hpp"

namespace crowdx {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<param>[<index>]" or "input[<index>]"
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  double kink_margin = 0.0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

namespace detail {

inline double probe_loss(const Tensor<double>& out, const Tensor<double>& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out.data[i] * r.data[i];
  return s;
}

inline Tensor<double> probe_weights(const Tensor<double>& like, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> r(like.n, like.c, like.h, like.w);
  for (double& v : r.data) v = rng.uniform(-1.0, 1.0);
  return r;
}

inline void record(GradCheckResult& res, double analytic, double numeric, const std::string& name,
                   std::size_t idx) {
  const double e = relative_error(analytic, numeric);
  ++res.checked;
  if (res.worst.empty() || e > res.max_rel_error) {
    res.max_rel_error = e;
    res.worst = name + "[" + std::to_string(idx) + "]";
    res.worst_analytic = analytic;
    res.worst_numeric = numeric;
  }
}

// `eval` recomputes the probe loss with the current parameter values.
// `refine(j)`, when given, supplies a more precise numeric derivative for
// entries too small to resolve in double precision.
template <class Eval, class Refine>
void check_tensor(GradCheckResult& res, Tensor<double>& values, const Tensor<double>& analytic, double eps,
                  const std::string& name, Eval&& eval, Refine&& refine, double resolvable) {
  for (std::size_t j = 0; j < values.size(); ++j) {
    const double saved = values.data[j];
    values.data[j] = saved + eps;
    const double lp = eval();
    values.data[j] = saved - eps;
    const double lm = eval();
    values.data[j] = saved;
    double numeric = (lp - lm) / (2.0 * eps);
    const double a = analytic.data[j];
    if ((a != 0.0 || numeric != 0.0) && std::abs(a) + std::abs(numeric) < resolvable) numeric = refine(j);
    record(res, a, numeric, name, j);
  }
}

template <class To, class From>
Tensor<To> convert(const Tensor<From>& t) {
  Tensor<To> o(t.n, t.c, t.h, t.w);
  for (std::size_t i = 0; i < t.size(); ++i) o.data[i] = static_cast<To>(t.data[i]);
  return o;
}

template <class T>
long double probe_loss_ext(const Tensor<T>& out, const Tensor<long double>& r) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < out.size(); ++i) s += static_cast<long double>(out.data[i]) * r.data[i];
  return s;
}

}  // namespace detail

/// Checks every parameter of `layer` and its input.
inline GradCheckResult grad_check(Layer<double>& layer, Tensor<double> x, double eps = 1e-5,
                                  std::uint64_t probe_seed = 1) {
  const Tensor<double> out = layer.forward(x, true);
  const Tensor<double> r = detail::probe_weights(out, probe_seed);
  for (Param<double>* p : layer.params()) p->grad.fill(0.0);
  const Tensor<double> dx = layer.backward(r, true);

  GradCheckResult res;
  res.kink_margin = layer.kink_margin();
  auto eval = [&] { return detail::probe_loss(layer.forward(x, false), r); };
  auto none = [](std::size_t) -> double { throw std::logic_error("unreachable"); };
  for (Param<double>* p : layer.params()) detail::check_tensor(res, p->value, p->grad, eps, p->name, eval, none, 0.0);
  detail::check_tensor(res, x, dx, eps, "input", eval, none, 0.0);
  return res;
}

/// Checks every parameter of the network and its input. A perturbed parameter
/// only re-runs the layers from its own onward.
///
/// A double-precision central difference carries rounding noise of roughly
/// ulp(loss) / (2 eps). Entries whose derivatives are within a factor 1e5 of
/// that floor get their numeric derivative from a long double copy of the
/// network instead; the analytic side is always the double backward pass.
inline GradCheckResult grad_check(MiniESANet<double>& net, Tensor<double> x, double eps = 1e-5,
                                  std::uint64_t probe_seed = 1) {
  net.check_input(x);
  std::vector<Tensor<double>> inputs;
  const Tensor<double> out = net.forward_from(0, x, true, &inputs);
  const Tensor<double> r = detail::probe_weights(out, probe_seed);
  net.zero_grad();
  const Tensor<double> dx = net.backward(r, true);

  double scale = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) scale += std::abs(out.data[i] * r.data[i]);
  const double noise = 8.0 * scale * std::numeric_limits<double>::epsilon() / (2.0 * eps);
  const double resolvable = 1e5 * noise;

  // Extended-precision twin, built on first use.
  std::unique_ptr<MiniESANet<long double>> ext;
  std::vector<Tensor<long double>> ext_inputs;
  Tensor<long double> ext_x, ext_r;
  auto twin = [&]() -> MiniESANet<long double>& {
    if (!ext) {
      ext = std::make_unique<MiniESANet<long double>>(net.config());
      ext->copy_weights_from(net);
      ext_x = detail::convert<long double>(x);
      ext_r = detail::convert<long double>(r);
      ext->forward_from(0, ext_x, false, &ext_inputs);
    }
    return *ext;
  };
  const long double leps = eps;

  GradCheckResult res;
  res.kink_margin = net.kink_margin();
  for (std::size_t l = 0; l < net.layer_count(); ++l) {
    auto eval = [&] { return detail::probe_loss(net.forward_from(l, inputs[l], false), r); };
    auto params = net.layer(l).params();
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      auto refine = [&](std::size_t j) {
        Tensor<long double>& v = twin().layer(l).params()[pi]->value;
        const long double saved = v.data[j];
        v.data[j] = saved + leps;
        const long double lp = detail::probe_loss_ext(ext->forward_from(l, ext_inputs[l], false), ext_r);
        v.data[j] = saved - leps;
        const long double lm = detail::probe_loss_ext(ext->forward_from(l, ext_inputs[l], false), ext_r);
        v.data[j] = saved;
        return static_cast<double>((lp - lm) / (2.0L * leps));
      };
      detail::check_tensor(res, params[pi]->value, params[pi]->grad, eps, params[pi]->name, eval, refine,
                           resolvable);
    }
  }
  auto eval_input = [&] { return detail::probe_loss(net.forward_from(0, x, false), r); };
  auto refine_input = [&](std::size_t j) {
    twin();
    Tensor<long double> xe = ext_x;
    xe.data[j] = ext_x.data[j] + leps;
    const long double lp = detail::probe_loss_ext(ext->forward_from(0, xe, false), ext_r);
    xe.data[j] = ext_x.data[j] - leps;
    const long double lm = detail::probe_loss_ext(ext->forward_from(0, xe, false), ext_r);
    return static_cast<double>((lp - lm) / (2.0L * leps));
  };
  detail::check_tensor(res, x, dx, eps, "input", eval_input, refine_input, resolvable);
  return res;
}

struct GradCheckCase {
  MiniESANet<double> net;
  Tensor<double> input;
  std::uint64_t seed = 0;  // the seed that produced this case
};

/// A network and input suitable for finite differences: attention output
/// projections are randomized (at initialization they are zero, which would
/// hide the attention gradients), and seeds are advanced until at least half the outputs
/// are active and no relu input or max-pool gap lies within `min_margin` of a
/// kink, where a step of size eps could cross it.
inline GradCheckCase make_gradcheck_case(std::uint64_t seed, int height = 16, int width = 16,
                                         double min_margin = 1e-4, int max_tries = 64) {
  for (int t = 0; t < max_tries; ++t, ++seed) {
    GradCheckCase c{MiniESANet<double>(NetConfig{}, seed), Tensor<double>(1, 3, height, width), seed};
    Rng rng(derive_seed(seed, 7));
    for (std::size_t l = 0; l < c.net.layer_count(); ++l)
      if (auto* a = dynamic_cast<AttentionBlock<double>*>(&c.net.layer(l))) a->output().init_he_uniform(rng);
    for (double& v : c.input.data) v = rng.uniform();
    const Tensor<double> out = c.net.forward(c.input, true);
    const auto active = std::count_if(out.data.begin(), out.data.end(), [](double v) { return v > 0.0; });
    if (c.net.kink_margin() >= min_margin && 2 * static_cast<std::size_t>(active) >= out.size()) return c;
  }
  throw std::runtime_error("no gradient-check case with kink margin >= " + std::to_string(min_margin));
}

}  // namespace crowdx
