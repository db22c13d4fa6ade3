#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "crowdx/gradcheck.hpp"
#include "crowdx/layers.hpp"

using namespace crowdx;

namespace {

Tensor<double> random_tensor(int n, int c, int h, int w, std::uint64_t seed, double lo = -1, double hi = 1) {
  Tensor<double> t(n, c, h, w);
  Rng rng(seed);
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

void randomize(Conv2d<double>& conv, std::uint64_t seed) {
  Rng rng(seed);
  for (double& v : conv.weight().value.data) v = rng.uniform(-0.5, 0.5);
  if (conv.bias())
    for (double& v : conv.bias()->value.data) v = rng.uniform(-0.5, 0.5);
}

// Oracle: direct "same" convolution with zero padding.
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b, int dil) {
  const int oc = w.n, ic = w.c, k = w.h, r = dil * (k / 2);
  Tensor<double> y(x.n, oc, x.h, x.w);
  for (int n = 0; n < x.n; ++n)
    for (int o = 0; o < oc; ++o)
      for (int yy = 0; yy < x.h; ++yy)
        for (int xx = 0; xx < x.w; ++xx) {
          double s = b ? b->data[o] : 0.0;
          for (int i = 0; i < ic; ++i)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int sy = yy + ky * dil - r, sx = xx + kx * dil - r;
                if (sy < 0 || sx < 0 || sy >= x.h || sx >= x.w) continue;
                s += w.at(o, i, ky, kx) * x.at(n, i, sy, sx);
              }
          y.at(n, o, yy, xx) = s;
        }
  return y;
}

// Oracle for the attention block, written with plain loops.
Tensor<double> naive_attention(AttentionBlock<double>& a, const Tensor<double>& x) {
  const int C = x.c, Ch = C / 2, P = x.h * x.w;
  auto proj = [&](Conv2d<double>& conv, const double* src, int cin, int cout) {
    std::vector<double> out(static_cast<std::size_t>(cout) * P);
    for (int o = 0; o < cout; ++o)
      for (int p = 0; p < P; ++p) {
        double s = conv.bias() ? conv.bias()->value.data[o] : 0.0;
        for (int i = 0; i < cin; ++i) s += conv.weight().value.data[o * cin + i] * src[i * P + p];
        out[o * P + p] = s;
      }
    return out;
  };
  Tensor<double> y = x;
  for (int n = 0; n < x.n; ++n) {
    const double* xs = x.sample(n);
    const auto q = proj(a.query(), xs, C, Ch), k = proj(a.key(), xs, C, Ch), g = proj(a.value(), xs, C, Ch);
    std::vector<double> mixed(static_cast<std::size_t>(Ch) * P, 0.0);
    for (int i = 0; i < P; ++i) {
      std::vector<double> row(P);
      double mx = -1e300;
      for (int j = 0; j < P; ++j) {
        double s = 0;
        for (int c = 0; c < Ch; ++c) s += q[c * P + i] * k[c * P + j];
        row[j] = s / std::sqrt(static_cast<double>(Ch));
        mx = std::max(mx, row[j]);
      }
      double z = 0;
      for (double& v : row) z += (v = std::exp(v - mx));
      for (int j = 0; j < P; ++j)
        for (int c = 0; c < Ch; ++c) mixed[c * P + i] += g[c * P + j] * row[j] / z;
    }
    const auto o = proj(a.output(), mixed.data(), Ch, C);
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < P; ++p) y.sample(n)[c * P + p] += o[c * P + p];
  }
  return y;
}

AttentionBlock<double> random_attention(int C, std::uint64_t seed) {
  AttentionBlock<double> a("att", C);
  Rng rng(seed);
  a.init(rng);
  randomize(a.output(), seed + 1);
  return a;
}

}  // namespace

TEST(Conv, MatchesDirectConvolution) {
  for (int dil : {1, 2}) {
    Conv2d<double> conv("c", 3, 4, 3, dil);
    randomize(conv, 5);
    const auto x = random_tensor(2, 3, 9, 7, 6);
    const auto y = conv.forward(x, false);
    const auto want = naive_conv(x, conv.weight().value, &conv.bias()->value, dil);
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y.data[i], want.data[i], 1e-12);
  }
  Conv2d<double> pw("p", 5, 2, 1, 1, false);
  randomize(pw, 8);
  const auto x = random_tensor(1, 5, 4, 6, 9);
  const auto y = pw.forward(x, false);
  const auto want = naive_conv(x, pw.weight().value, nullptr, 1);
  for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y.data[i], want.data[i], 1e-12);
}

TEST(Conv, RejectsWrongChannels) {
  Conv2d<double> conv("front.conv1", 3, 4, 3);
  EXPECT_THROW(conv.forward(Tensor<double>(1, 2, 4, 4), false), ParameterError);
}

TEST(Pool, TakesWindowMaxima) {
  MaxPool2<double> pool("p");
  const auto x = random_tensor(1, 2, 4, 6, 3);
  const auto y = pool.forward(x, false);
  ASSERT_EQ(y.h, 2);
  ASSERT_EQ(y.w, 3);
  for (int c = 0; c < 2; ++c)
    for (int yy = 0; yy < 2; ++yy)
      for (int xx = 0; xx < 3; ++xx) {
        const double m = std::max({x.at(0, c, 2 * yy, 2 * xx), x.at(0, c, 2 * yy, 2 * xx + 1),
                                   x.at(0, c, 2 * yy + 1, 2 * xx), x.at(0, c, 2 * yy + 1, 2 * xx + 1)});
        EXPECT_EQ(y.at(0, c, yy, xx), m);
      }
}

TEST(Attention, MatchesLoopImplementation) {
  auto a = random_attention(6, 4);
  const auto x = random_tensor(2, 6, 5, 3, 10);
  const auto y = a.forward(x, false);
  const auto want = naive_attention(a, x);
  for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y.data[i], want.data[i], 1e-12);
}

TEST(Attention, RowsSumToOne) {
  AttentionBlock<float> a("att", 8);
  Rng rng(2);
  a.init(rng);
  Tensor<float> x(1, 8, 12, 10);
  for (float& v : x.data) v = static_cast<float>(rng.uniform(-2, 2));
  a.forward(x, true);
  const auto& A = a.attention(0);
  ASSERT_EQ(A.rows(), 120);
  for (int i = 0; i < A.rows(); ++i) EXPECT_NEAR(A.row(i).sum(), 1.0f, 1e-6f);
}

TEST(Attention, ZeroOutputProjectionIsIdentity) {
  AttentionBlock<double> a("att", 4);
  Rng rng(1);
  a.init(rng);
  const auto x = random_tensor(1, 4, 6, 6, 3);
  EXPECT_EQ(a.forward(x, false).data, x.data);
}

TEST(Attention, ConstantInputClosedForm) {
  // Identical keys give uniform attention, so the block adds W_out(g) + b_out
  // where g is the value projection of the shared feature vector.
  AttentionBlock<double> a("att", 4);
  Rng rng(3);
  a.init(rng);
  randomize(a.output(), 4);
  randomize(a.value(), 5);
  const double f[4] = {0.3, -1.2, 0.7, 2.0};
  Tensor<double> x(1, 4, 3, 5);
  for (int c = 0; c < 4; ++c)
    for (int p = 0; p < 15; ++p) x.data[c * 15 + p] = f[c];
  const auto& Wg = a.value().weight().value.data;
  const auto& bg = a.value().bias()->value.data;
  const auto& Wo = a.output().weight().value.data;
  const auto& bo = a.output().bias()->value.data;
  double g[2];
  for (int o = 0; o < 2; ++o) {
    g[o] = bg[o];
    for (int i = 0; i < 4; ++i) g[o] += Wg[o * 4 + i] * f[i];
  }
  const auto y = a.forward(x, false);
  for (int c = 0; c < 4; ++c) {
    const double want = f[c] + bo[c] + Wo[c * 2] * g[0] + Wo[c * 2 + 1] * g[1];
    for (int p = 0; p < 15; ++p) EXPECT_NEAR(y.data[c * 15 + p], want, 1e-12);
  }
}

TEST(Attention, PermutationEquivariant) {
  auto a = random_attention(4, 8);
  const auto x = random_tensor(1, 4, 4, 5, 12);
  const int P = 20;
  std::vector<int> perm(P);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(13);
  for (int i = P - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  Tensor<double> xp = x;
  for (int c = 0; c < 4; ++c)
    for (int p = 0; p < P; ++p) xp.data[c * P + p] = x.data[c * P + perm[p]];
  const auto y = a.forward(x, false);
  const auto yp = a.forward(xp, false);
  for (int c = 0; c < 4; ++c)
    for (int p = 0; p < P; ++p) EXPECT_NEAR(yp.data[c * P + p], y.data[c * P + perm[p]], 1e-12);
}

TEST(Attention, CapIsEnforced) {
  AttentionBlock<float> a("refine.att1", 4, 100);
  try {
    a.forward(Tensor<float>(1, 4, 11, 10), false);
    FAIL() << "expected the cap to trigger";
  } catch (const ParameterError& e) {
    EXPECT_NE(std::string(e.what()).find("downsample"), std::string::npos);
  }
  EXPECT_NO_THROW(a.forward(Tensor<float>(1, 4, 10, 10), false));
}

TEST(Loss, HandCases) {
  Tensor<double> pred(1, 1, 2, 2, 1.0), target(1, 1, 2, 2, 0.0);
  EXPECT_DOUBLE_EQ(loss_l2(pred, pred), 0.0);
  EXPECT_DOUBLE_EQ(loss_l2(pred, target), 2.0);
  Tensor<double> twice(1, 1, 2, 2, 2.0);
  EXPECT_DOUBLE_EQ(loss_l2(twice, target), 4.0 * loss_l2(pred, target));
  Tensor<double> grad;
  loss_l2(twice, target, &grad);
  for (double g : grad.data) EXPECT_DOUBLE_EQ(g, 2.0);
}

TEST(Loss, BatchMeanOfPerImageSums) {
  Tensor<double> pred(2, 1, 1, 3, 0.0), target(2, 1, 1, 3, 0.0);
  pred.data = {1, 1, 1, 3, 0, 0};
  EXPECT_DOUBLE_EQ(loss_l2(pred, target), 0.5 * (0.5 * 3 + 0.5 * 9));
}

TEST(GradCheck, Conv) {
  for (int dil : {1, 2}) {
    Conv2d<double> conv("c", 3, 4, 3, dil);
    randomize(conv, 21);
    EXPECT_LT(grad_check(conv, random_tensor(2, 3, 6, 5, 22)).max_rel_error, 1e-4);
  }
  Conv2d<double> pw("p", 4, 1, 1);
  randomize(pw, 23);
  EXPECT_LT(grad_check(pw, random_tensor(1, 4, 4, 4, 24)).max_rel_error, 1e-4);
}

TEST(GradCheck, ReluAwayFromKink) {
  ReLU<double> relu("r");
  auto x = random_tensor(1, 3, 5, 5, 31);
  for (double& v : x.data) v += v >= 0 ? 1e-3 : -1e-3;
  EXPECT_LT(grad_check(relu, x).max_rel_error, 1e-6);
}

TEST(GradCheck, MaxPool) {
  MaxPool2<double> pool("p");
  EXPECT_LT(grad_check(pool, random_tensor(1, 2, 6, 6, 41)).max_rel_error, 1e-4);
}

TEST(GradCheck, Attention) {
  auto a = random_attention(6, 51);
  EXPECT_LT(grad_check(a, random_tensor(1, 6, 4, 4, 52)).max_rel_error, 1e-4);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // A layer whose backward pass is off by 1% must fail the check.
  struct Wrong : Layer<double> {
    Wrong() : Layer<double>("wrong") {}
    std::string kind() const override { return "wrong"; }
    Tensor<double> forward(const Tensor<double>& x, bool) override {
      x_ = x;
      Tensor<double> y = x;
      for (double& v : y.data) v = v * v;
      return y;
    }
    Tensor<double> backward(const Tensor<double>& dy, bool) override {
      Tensor<double> dx = dy;
      for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] *= 2.02 * x_.data[i];
      return dx;
    }
    Tensor<double> x_;
  } wrong;
  EXPECT_GT(grad_check(wrong, random_tensor(1, 1, 3, 3, 61)).max_rel_error, 1e-3);
}
