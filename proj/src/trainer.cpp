#include "crowdx/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "crowdx/error.hpp"
#include "crowdx/rng.hpp"

namespace crowdx {

using nlohmann::json;

double TrainConfig::lr_at(int epoch) const {
  return lr_initial / std::pow(lr_decay_factor, epoch / lr_decay_every_epochs);
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ParameterError("batch_size", "must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("momentum", "must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ParameterError("weight_decay", "must be >= 0");
  // Zero is accepted so that a run can be frozen on purpose; negative or
  // non-finite rates are not.
  if (!(lr_initial >= 0.0 && std::isfinite(lr_initial))) throw ParameterError("lr_initial", "must be >= 0");
  if (!(lr_decay_factor > 0.0)) throw ParameterError("lr_decay_factor", "must be > 0");
  if (lr_decay_every_epochs < 1) throw ParameterError("lr_decay_every_epochs", "must be >= 1");
  if (epochs < 1) throw ParameterError("epochs", "must be >= 1");
  if (precision != Precision::F32)
    throw ParameterError("precision", "training runs in f32; f64 is reserved for gradient checks");
  if (crop_width < 0 || crop_width % 4) throw ParameterError("crop_width", "must be a nonnegative multiple of 4");
  if (crop_height < 0 || crop_height % 4) throw ParameterError("crop_height", "must be a nonnegative multiple of 4");
  if (!(density_scale > 0.0)) throw ParameterError("density_scale", "must be > 0");
  if (!(grad_clip_norm >= 0.0)) throw ParameterError("grad_clip_norm", "must be >= 0");
  if (net.front_channels < 1 || net.feature_channels < 2 || net.feature_channels % 2)
    throw ParameterError("net", "channel widths must be positive, feature width even");
}

json train_config_to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"lr_initial", c.lr_initial},
          {"lr_decay_factor", c.lr_decay_factor},
          {"lr_decay_every_epochs", c.lr_decay_every_epochs},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"precision", c.precision == Precision::F32 ? "f32" : "f64"},
          {"crop_width", c.crop_width},
          {"crop_height", c.crop_height},
          {"density_scale", c.density_scale},
          {"grad_clip_norm", c.grad_clip_norm},
          {"net", net_config_to_json(c.net)}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  c.batch_size = j.value("batch_size", c.batch_size);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.lr_initial = j.value("lr_initial", c.lr_initial);
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.lr_decay_every_epochs = j.value("lr_decay_every_epochs", c.lr_decay_every_epochs);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  if (j.contains("precision")) {
    const std::string p = j["precision"].get<std::string>();
    if (p == "f32") c.precision = Precision::F32;
    else if (p == "f64") c.precision = Precision::F64;
    else throw ParameterError("precision", "expected f32 or f64, got " + p);
  }
  c.crop_width = j.value("crop_width", c.crop_width);
  c.crop_height = j.value("crop_height", c.crop_height);
  c.density_scale = j.value("density_scale", c.density_scale);
  c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
  if (j.contains("net")) c.net = net_config_from_json(j["net"]);
  return c;
}

std::uint64_t train_config_hash(const TrainConfig& c) { return fnv1a64(train_config_to_json(c).dump()); }

// The sum-per-image loss on a from-scratch net gives early gradient norms in
// the thousands; unclipped, lr 1e-4 drives the head ReLU negative everywhere
// within an epoch. Clipping keeps the step bounded, and the longer decay
// period gives the front-end time to learn before the rate drops.
TrainConfig desk_train_config() {
  TrainConfig c;
  c.grad_clip_norm = 100.0;
  c.lr_decay_every_epochs = 10;
  return c;
}

TrainConfig finetune_train_config() {
  TrainConfig c;
  c.batch_size = 50;
  c.lr_initial = 1e-6;
  return c;
}

std::string TrainedModel::history_csv() const {
  std::ostringstream os;
  os << "epoch,lr,train_loss,val_mae,val_mse\n";
  char line[256];
  for (const EpochRecord& r : history) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.lr, r.train_loss, r.val_mae,
                  r.val_mse);
    os << line;
  }
  return os.str();
}

json TrainedModel::provenance() const {
  return {{"train_predicate", train_predicate}, {"config", train_config_to_json(config)}, {"seed", config.seed}};
}

Tensor<float> density_tensor(const DensityMap& map, int x0, int y0, int w, int h) {
  if (w < 0) w = map.width;
  if (h < 0) h = map.height;
  Tensor<float> t(1, 1, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) t.at(0, 0, y, x) = map.at(x0 + x, y0 + y);
  return t;
}

std::vector<Tile> plan_tiles(int width, int height, int attention_cap) {
  constexpr int s = MiniESANet<float>::kStride;
  const int gw = width / s, gh = height / s;
  int kx = 1, ky = 1;
  auto cells = [](int n, int k) { return (n + k - 1) / k; };
  while (static_cast<long>(cells(gw, kx)) * cells(gh, ky) > attention_cap) {
    if (cells(gw, kx) >= cells(gh, ky) && kx < gw) ++kx;
    else if (ky < gh) ++ky;
    else break;
  }
  std::vector<Tile> tiles;
  for (int j = 0; j < ky; ++j)
    for (int i = 0; i < kx; ++i) {
      const int x0 = i * gw / kx, x1 = (i + 1) * gw / kx;
      const int y0 = j * gh / ky, y1 = (j + 1) * gh / ky;
      tiles.push_back(Tile{x0 * s, y0 * s, (x1 - x0) * s, (y1 - y0) * s});
    }
  return tiles;
}

namespace {

// The per-step activation buffers are a few MB each. With glibc's defaults they
// go through mmap/munmap on every step, and the page faults cost more than the
// convolutions themselves.
void tune_allocator() {
#ifdef __GLIBC__
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

}  // namespace

double predict_count(MiniESANet<float>& net, const RgbImage& image) {
  tune_allocator();
  if (image.width % 4 || image.height % 4)
    throw ParameterError("image", "resolution " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                                      " is not divisible by 4");
  double total = 0.0;
  for (const Tile& t : plan_tiles(image.width, image.height, net.config().attention_cap)) {
    const Tensor<float> out =
        net.forward(image_tensor<float>(image.pixels.data(), image.width, t.x, t.y, t.w, t.h), false);
    for (float v : out.data) total += v;
  }
  return total;
}

namespace {

// Re-expresses the head for a new output scale: relu(a*z) = a*relu(z), a > 0.
void rescale_head(MiniESANet<float>& net, float new_scale) {
  const float old_scale = net.output_scale();
  if (old_scale != new_scale) {
    const float factor = new_scale / old_scale;
    Conv2d<float>& head = net.head();
    for (float& v : head.weight().value.data) v *= factor;
    for (float& v : head.bias()->value.data) v *= factor;
  }
  net.set_output_scale(new_scale);
}

void check_training_samples(const std::vector<std::shared_ptr<const LoadedSample>>& set, const char* what) {
  for (const auto& s : set) {
    const RgbImage& img = s->image;
    const RgbImage& first = set.front()->image;
    if (img.width != first.width || img.height != first.height)
      throw ValidationError(std::string(what) + " set mixes resolutions: " + set.front()->sample_id + " is " +
                            std::to_string(first.width) + "x" + std::to_string(first.height) + ", " + s->sample_id +
                            " is " + std::to_string(img.width) + "x" + std::to_string(img.height));
    if (s->density.downsample != MiniESANet<float>::kStride || s->density.width * 4 != img.width ||
        s->density.height * 4 != img.height)
      throw ValidationError("sample " + s->sample_id + ": density grid must have downsample 4 and match the image");
  }
}

}  // namespace

TrainedModel train(const std::vector<std::shared_ptr<const LoadedSample>>& train_set,
                   const std::vector<std::shared_ptr<const LoadedSample>>& val_set, const TrainConfig& cfg,
                   const MiniESANet<float>* init, std::string predicate, const TrainCallbacks& callbacks) {
  cfg.validate();
  tune_allocator();
  if (train_set.empty()) throw ValidationError("training set is empty");
  check_training_samples(train_set, "training");

  TrainedModel model{MiniESANet<float>(cfg.net, derive_seed(cfg.seed, 0)), {}, std::move(predicate), cfg};
  MiniESANet<float>& net = model.net;
  if (init) {
    if (!(init->config() == cfg.net)) throw ParameterError("init", "network shape differs from the configuration");
    net.copy_weights_from(*init);
    rescale_head(net, static_cast<float>(cfg.density_scale));
  } else {
    net.set_output_scale(static_cast<float>(cfg.density_scale));
  }

  const int W = train_set.front()->image.width, H = train_set.front()->image.height;
  const int cw = (cfg.crop_width > 0 && cfg.crop_width < W) ? cfg.crop_width : W;
  const int ch = (cfg.crop_height > 0 && cfg.crop_height < H) ? cfg.crop_height : H;

  auto params = net.params();
  std::vector<std::vector<float>> velocity(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) velocity[i].assign(params[i]->value.size(), 0.0f);

  Rng rng(derive_seed(cfg.seed, 1));
  std::vector<std::size_t> order(train_set.size());
  const double scale = cfg.density_scale;
  const float mu = static_cast<float>(cfg.momentum), wd = static_cast<float>(cfg.weight_decay);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const float lr = static_cast<float>(cfg.lr_at(epoch));
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double inv_b = 1.0 / static_cast<double>(end - start);
      net.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const LoadedSample& s = *train_set[order[k]];
        const int x0 = 4 * static_cast<int>(rng.below(static_cast<std::uint64_t>((W - cw) / 4 + 1)));
        const int y0 = 4 * static_cast<int>(rng.below(static_cast<std::uint64_t>((H - ch) / 4 + 1)));
        const Tensor<float> x = image_tensor<float>(s.image.pixels.data(), W, x0, y0, cw, ch);
        Tensor<float> target = density_tensor(s.density, x0 / 4, y0 / 4, cw / 4, ch / 4);
        for (float& v : target.data) v = static_cast<float>(v * scale);
        const Tensor<float> out = net.forward_raw(x, true);
        Tensor<float> grad;
        batch_loss += loss_l2(out, target, &grad) * inv_b;
        for (float& g : grad.data) g = static_cast<float>(g * inv_b);
        net.backward(grad, false);
      }
      if (!std::isfinite(batch_loss))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batches));
      // L2 weight decay folded into the gradient, then Nesterov momentum.
      for (Param<float>* p : params)
        for (std::size_t j = 0; j < p->grad.size(); ++j) p->grad.data[j] += wd * p->value.data[j];
      float clip = 1.0f;
      if (cfg.grad_clip_norm > 0.0) {
        double sq = 0.0;
        for (const Param<float>* p : params)
          for (float g : p->grad.data) sq += static_cast<double>(g) * g;
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip_norm) clip = static_cast<float>(cfg.grad_clip_norm / norm);
      }
      for (std::size_t i = 0; i < params.size(); ++i) {
        float* w = params[i]->value.data.data();
        const float* g = params[i]->grad.data.data();
        float* v = velocity[i].data();
        for (std::size_t j = 0; j < velocity[i].size(); ++j) {
          const float gj = clip * g[j];
          v[j] = mu * v[j] + gj;
          w[j] -= lr * (gj + mu * v[j]);
        }
      }
      loss_sum += batch_loss;
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / batches / (scale * scale);
    rec.val_mae = rec.val_mse = std::numeric_limits<double>::quiet_NaN();
    if (!val_set.empty()) {
      std::vector<double> est, truth;
      for (const auto& s : val_set) {
        est.push_back(predict_count(net, s->image));
        truth.push_back(s->count_in_frame);
      }
      const MetricPair m = mae_mse(est, truth);
      rec.val_mae = m.mae;
      rec.val_mse = m.mse;
    }
    model.history.push_back(rec);
    if (callbacks.on_epoch) callbacks.on_epoch(rec);
  }
  return model;
}

TrainedModel train(SampleStore& store, const SubsetView& train_view, const SubsetView* val_view,
                   const TrainConfig& cfg, const MiniESANet<float>* init, const std::string& context) {
  if (train_view.empty()) throw ValidationError("training subset " + train_view.label + " is empty");
  auto train_set = store.load_all(train_view, AccessPurpose::Train, context);
  std::vector<std::shared_ptr<const LoadedSample>> val_set;
  if (val_view) val_set = store.load_all(*val_view, AccessPurpose::Validate, context);
  return train(train_set, val_set, cfg, init, train_view.label);
}

}  // namespace crowdx
