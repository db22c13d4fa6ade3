#pragma once

#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "crowdx/layers.hpp"

namespace crowdx {

struct NetConfig {
  int front_channels = 16;  // first two convs
  int feature_channels = 32;  // everything after the first pool
  int attention_cap = 4096;   // max positions per attention block

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

inline nlohmann::json net_config_to_json(const NetConfig& c) {
  return {{"front_channels", c.front_channels},
          {"feature_channels", c.feature_channels},
          {"attention_cap", c.attention_cap}};
}

inline NetConfig net_config_from_json(const nlohmann::json& j) {
  NetConfig c;
  c.front_channels = j.value("front_channels", c.front_channels);
  c.feature_channels = j.value("feature_channels", c.feature_channels);
  c.attention_cap = j.value("attention_cap", c.attention_cap);
  return c;
}

/// Small counting network with output stride 4:
///   conv3 relu conv3 relu pool  conv3 relu conv3 relu pool
///   attention attention  dconv3 relu dconv3 relu  conv1 relu
template <class T>
class MiniESANet {
 public:
  static constexpr int kStride = 4;

  explicit MiniESANet(const NetConfig& cfg = {}, std::uint64_t seed = 0) : cfg_(cfg) {
    const int a = cfg.front_channels, b = cfg.feature_channels;
    conv("front.conv1", 3, a, 1);
    add<ReLU<T>>("front.relu1");
    conv("front.conv2", a, a, 1);
    add<ReLU<T>>("front.relu2");
    add<MaxPool2<T>>("front.pool1");
    conv("front.conv3", a, b, 1);
    add<ReLU<T>>("front.relu3");
    conv("front.conv4", b, b, 1);
    add<ReLU<T>>("front.relu4");
    add<MaxPool2<T>>("front.pool2");
    add<AttentionBlock<T>>("refine.att1", b, cfg.attention_cap);
    add<AttentionBlock<T>>("refine.att2", b, cfg.attention_cap);
    conv("tail.dconv1", b, b, 2);
    add<ReLU<T>>("tail.relu1");
    conv("tail.dconv2", b, b, 2);
    add<ReLU<T>>("tail.relu2");
    layers_.push_back(std::make_unique<Conv2d<T>>("head.conv", b, 1, 1));
    add<ReLU<T>>("head.relu");
    initialize(seed);
  }

  MiniESANet(const MiniESANet& o) : MiniESANet(o.cfg_) { copy_weights_from(o); }
  MiniESANet& operator=(const MiniESANet& o) {
    if (this != &o) {
      MiniESANet tmp(o);
      std::swap(cfg_, tmp.cfg_);
      std::swap(layers_, tmp.layers_);
      std::swap(scale_, tmp.scale_);
    }
    return *this;
  }
  MiniESANet(MiniESANet&&) noexcept = default;
  MiniESANet& operator=(MiniESANet&&) noexcept = default;

  /// He-uniform convs, zero biases, zero attention output projections.
  /// The head is the exception: its input is nonnegative, so a full-size
  /// random 1x1 filter often sends the whole map below zero and the final
  /// relu never passes a gradient. It starts small with a positive bias.
  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    for (auto& l : layers_) {
      if (auto* c = dynamic_cast<Conv2d<T>*>(l.get())) c->init_he_uniform(rng);
      if (auto* a = dynamic_cast<AttentionBlock<T>*>(l.get())) a->init(rng);
    }
    for (T& v : head().weight().value.data) v *= T(kHeadWeightGain);
    head().bias()->value.fill(T(kHeadBias));
  }

  static constexpr double kHeadWeightGain = 0.1;
  static constexpr double kHeadBias = 0.1;

  const NetConfig& config() const { return cfg_; }
  std::size_t layer_count() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_[i]; }
  Conv2d<T>& head() { return dynamic_cast<Conv2d<T>&>(*layers_[layers_.size() - 2]); }

  void check_input(const Tensor<T>& x) const {
    if (x.c != 3 || x.h % kStride || x.w % kStride || x.h == 0 || x.w == 0)
      throw ParameterError("input", "expected (N,3,H,W) with H and W divisible by 4, got " + x.shape_string());
  }

  /// Density prediction: the raw output divided by output_scale().
  Tensor<T> forward(const Tensor<T>& x, bool train = false) {
    Tensor<T> y = forward_raw(x, train);
    if (scale_ != T(1))
      for (T& v : y.data) v /= scale_;
    return y;
  }

  /// Output of the last layer. backward() takes gradients with respect to it.
  Tensor<T> forward_raw(const Tensor<T>& x, bool train = false) {
    check_input(x);
    return forward_from(0, x, train);
  }

  /// Training targets are densities times this factor, which keeps the raw
  /// outputs in a comfortable range for the optimizer. Stored with the weights.
  T output_scale() const { return scale_; }
  void set_output_scale(T s) {
    if (!(s > T(0))) throw ParameterError("output_scale", "must be > 0");
    scale_ = s;
  }

  /// Runs layers [first, end). Gradient checks use it to re-evaluate only the
  /// part of the network downstream of a perturbed parameter.
  Tensor<T> forward_from(std::size_t first, Tensor<T> x, bool train = false,
                         std::vector<Tensor<T>>* inputs = nullptr) {
    for (std::size_t i = first; i < layers_.size(); ++i) {
      if (inputs) inputs->push_back(x);
      x = layers_[i]->forward(x, train);
    }
    return x;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool need_dx = false) {
    Tensor<T> g = dy;
    for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g, need_dx || i > 0);
    return g;
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> p;
    for (auto& l : layers_)
      for (Param<T>* q : l->params()) p.push_back(q);
    return p;
  }
  std::vector<const Param<T>*> params() const {
    std::vector<const Param<T>*> p;
    for (Param<T>* q : const_cast<MiniESANet*>(this)->params()) p.push_back(q);
    return p;
  }

  void zero_grad() {
    for (Param<T>* p : params()) p->grad.fill(T(0));
  }

  double kink_margin() const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& l : layers_) m = std::min(m, l->kink_margin());
    return m;
  }

  /// Copies weights by name, converting precision. Shapes must match.
  template <class U>
  void copy_weights_from(const MiniESANet<U>& other) {
    auto src = other.params();
    auto dst = params();
    if (src.size() != dst.size()) throw ParameterError("weights", "parameter count mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (src[i]->name != dst[i]->name || src[i]->value.size() != dst[i]->value.size())
        throw ParameterError(dst[i]->name, "shape or name mismatch when copying weights");
      for (std::size_t j = 0; j < dst[i]->value.size(); ++j)
        dst[i]->value.data[j] = static_cast<T>(src[i]->value.data[j]);
    }
    scale_ = static_cast<T>(other.output_scale());
  }

 private:
  template <class L, class... Args>
  void add(const std::string& name, Args&&... args) {
    layers_.push_back(std::make_unique<L>(name, std::forward<Args>(args)...));
  }
  void conv(const std::string& name, int in, int out, int dilation) {
    layers_.push_back(std::make_unique<Conv2d<T>>(name, in, out, 3, dilation));
  }

  NetConfig cfg_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  T scale_ = T(1);
};

/// Window (x0, y0, w, h) of an interleaved 8-bit RGB image whose rows are
/// `row_px` pixels long, as a (1,3,h,w) tensor scaled to [0,1].
template <class T>
Tensor<T> image_tensor(const std::uint8_t* rgb, int row_px, int x0, int y0, int w, int h) {
  Tensor<T> t(1, 3, h, w);
  const T inv = T(1) / T(255);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::uint8_t* p = rgb + 3 * (static_cast<std::size_t>(y0 + y) * row_px + (x0 + x));
      for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = static_cast<T>(p[c]) * inv;
    }
  return t;
}

}  // namespace crowdx
