#pragma once

// Differentiable layers for the counter. Each layer caches what its backward
// pass needs during a training-mode forward; backward accumulates into the
// parameter gradients (callers zero them) and returns the input gradient.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "crowdx/rng.hpp"
#include "crowdx/tensor.hpp"

namespace crowdx {

template <class T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  virtual Tensor<T> forward(const Tensor<T>& x, bool train) = 0;
  virtual Tensor<T> backward(const Tensor<T>& dy, bool need_dx = true) = 0;
  virtual std::vector<Param<T>*> params() { return {}; }
  virtual std::string kind() const = 0;
  /// Distance of the last training forward from a non-differentiable point
  /// (relu at 0, max-pool ties). Gradient checks need this to be large
  /// compared with the finite-difference step.
  virtual double kink_margin() const { return std::numeric_limits<double>::infinity(); }

  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

template <class T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(std::string name, int in_ch, int out_ch, int kernel, int dilation = 1, bool bias = true)
      : Layer<T>(std::move(name)), in_(in_ch), out_(out_ch), k_(kernel), dil_(dilation), has_bias_(bias),
        weight_(this->name() + ".weight", out_ch, in_ch, kernel, kernel) {
    if (kernel % 2 == 0) throw ParameterError("kernel", "must be odd");
    if (has_bias_) bias_ = Param<T>(this->name() + ".bias", 1, out_ch, 1, 1);
  }

  std::string kind() const override { return "conv"; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  Param<T>& weight() { return weight_; }
  Param<T>* bias() { return has_bias_ ? &bias_ : nullptr; }

  /// He-uniform weights, zero bias.
  void init_he_uniform(Rng& rng) {
    const double bound = std::sqrt(6.0 / (in_ * k_ * k_));
    for (T& v : weight_.value.data) v = static_cast<T>(rng.uniform(-bound, bound));
    if (has_bias_) bias_.value.fill(T(0));
  }

  std::vector<Param<T>*> params() override {
    std::vector<Param<T>*> p{&weight_};
    if (has_bias_) p.push_back(&bias_);
    return p;
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    if (x.c != in_)
      throw ParameterError(this->name(), "expected " + std::to_string(in_) + " input channels, got " +
                                             std::to_string(x.c) + " in " + x.shape_string());
    Tensor<T> y(x.n, out_, x.h, x.w);
    const auto W = weight_matrix();
    // Column buffers are kept between calls; reallocating them every step
    // costs more than filling them.
    if (train) cols_.resize(x.n);
    for (int i = 0; i < x.n; ++i) {
      auto Y = as_matrix(y, i);
      if (pointwise()) {
        Y.noalias() = W * as_matrix(x, i);
        if (train) cols_[i] = as_matrix(x, i);
      } else {
        RowMat<T>& cols = train ? cols_[i] : scratch_;
        im2col(x, i, cols);
        Y.noalias() = W * cols;
      }
      if (has_bias_) Y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias_.value.data.data(), out_);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool need_dx) override {
    if (static_cast<int>(cols_.size()) != dy.n) throw std::logic_error(this->name() + ": backward without forward");
    MatMap<T> dW(weight_.grad.data.data(), out_, in_ * k_ * k_);
    const auto W = weight_matrix();
    Tensor<T> dx;
    if (need_dx) dx = Tensor<T>(dy.n, in_, dy.h, dy.w);
    for (int i = 0; i < dy.n; ++i) {
      const auto dY = as_matrix(dy, i);
      dW.noalias() += dY * cols_[i].transpose();
      if (has_bias_) {
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(bias_.grad.data.data(), out_);
        db += dY.rowwise().sum();
      }
      if (need_dx) {
        if (pointwise()) {
          as_matrix(dx, i).noalias() = W.transpose() * dY;
        } else {
          scratch_.noalias() = W.transpose() * dY;
          col2im(scratch_, dx, i);
        }
      }
    }
    return dx;
  }

 private:
  bool pointwise() const { return k_ == 1; }

  ConstMatMap<T> weight_matrix() const {
    return ConstMatMap<T>(weight_.value.data.data(), out_, in_ * k_ * k_);
  }

  // Rows index (channel, ky, kx); columns index output positions. Zero padding
  // keeps the spatial size.
  void im2col(const Tensor<T>& x, int i, RowMat<T>& cols) const {
    const int H = x.h, Wd = x.w, r = k_ / 2;
    cols.resize(in_ * k_ * k_, H * Wd);
    const T* src = x.sample(i);
    for (int c = 0; c < in_; ++c) {
      const T* plane = src + static_cast<std::size_t>(c) * H * Wd;
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          T* row = cols.row((c * k_ + ky) * k_ + kx).data();
          const int oy = (ky - r) * dil_, ox = (kx - r) * dil_;
          for (int y = 0; y < H; ++y) {
            const int sy = y + oy;
            T* dst = row + static_cast<std::size_t>(y) * Wd;
            if (sy < 0 || sy >= H) {
              std::fill(dst, dst + Wd, T(0));
              continue;
            }
            const T* line = plane + static_cast<std::size_t>(sy) * Wd;
            for (int x0 = 0; x0 < Wd; ++x0) {
              const int sx = x0 + ox;
              dst[x0] = (sx >= 0 && sx < Wd) ? line[sx] : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const RowMat<T>& dcols, Tensor<T>& dx, int i) const {
    const int H = dx.h, Wd = dx.w, r = k_ / 2;
    T* dst = dx.sample(i);
    for (int c = 0; c < in_; ++c) {
      T* plane = dst + static_cast<std::size_t>(c) * H * Wd;
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const T* row = dcols.row((c * k_ + ky) * k_ + kx).data();
          const int oy = (ky - r) * dil_, ox = (kx - r) * dil_;
          for (int y = 0; y < H; ++y) {
            const int sy = y + oy;
            if (sy < 0 || sy >= H) continue;
            T* line = plane + static_cast<std::size_t>(sy) * Wd;
            const T* src = row + static_cast<std::size_t>(y) * Wd;
            const int x_lo = std::max(0, -ox), x_hi = std::min(Wd, Wd - ox);
            for (int x0 = x_lo; x0 < x_hi; ++x0) line[x0 + ox] += src[x0];
          }
        }
      }
    }
  }

  int in_, out_, k_, dil_;
  bool has_bias_;
  Param<T> weight_;
  Param<T> bias_;
  std::vector<RowMat<T>> cols_;
  RowMat<T> scratch_;
};

template <class T>
class ReLU : public Layer<T> {
 public:
  using Layer<T>::Layer;
  std::string kind() const override { return "relu"; }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> y = x;
    for (T& v : y.data) v = v > T(0) ? v : T(0);
    if (train) input_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool) override {
    require_same_shape(input_, dy, this->name());
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (!(input_.data[i] > T(0))) dx.data[i] = T(0);
    return dx;
  }

  double kink_margin() const override {
    double m = std::numeric_limits<double>::infinity();
    for (T v : input_.data) m = std::min(m, std::abs(static_cast<double>(v)));
    return m;
  }

 private:
  Tensor<T> input_;
};

/// 2x2 max pooling, stride 2. Ties go to the first element in raster order.
template <class T>
class MaxPool2 : public Layer<T> {
 public:
  using Layer<T>::Layer;
  std::string kind() const override { return "maxpool"; }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    if (x.h % 2 || x.w % 2)
      throw ParameterError(this->name(), "spatial size must be even, got " + x.shape_string());
    Tensor<T> y(x.n, x.c, x.h / 2, x.w / 2);
    if (train) {
      argmax_.assign(y.size(), 0);
      in_shape_ = Tensor<T>();
      in_shape_.n = x.n, in_shape_.c = x.c, in_shape_.h = x.h, in_shape_.w = x.w;
      margin_ = std::numeric_limits<double>::infinity();
    }
    std::size_t o = 0;
    for (int n = 0; n < x.n; ++n)
      for (int c = 0; c < x.c; ++c)
        for (int yy = 0; yy < y.h; ++yy)
          for (int xx = 0; xx < y.w; ++xx, ++o) {
            const std::size_t base = ((static_cast<std::size_t>(n) * x.c + c) * x.h + 2 * yy) * x.w + 2 * xx;
            const std::size_t idx[4] = {base, base + 1, base + x.w, base + x.w + 1};
            std::size_t best = idx[0];
            for (int k = 1; k < 4; ++k)
              if (x.data[idx[k]] > x.data[best]) best = idx[k];
            y.data[o] = x.data[best];
            if (train) {
              argmax_[o] = best;
              // Exact ties at zero come from a preceding relu; the gradient there is zero either way.
              if (x.data[best] != T(0))
                for (int k = 0; k < 4; ++k)
                  if (idx[k] != best)
                    margin_ = std::min(margin_, static_cast<double>(x.data[best] - x.data[idx[k]]));
            }
          }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool) override {
    if (argmax_.size() != dy.size()) throw std::logic_error(this->name() + ": backward without forward");
    Tensor<T> dx(in_shape_.n, in_shape_.c, in_shape_.h, in_shape_.w);
    for (std::size_t o = 0; o < dy.size(); ++o) dx.data[argmax_[o]] += dy.data[o];
    return dx;
  }

  double kink_margin() const override { return margin_; }

 private:
  std::vector<std::size_t> argmax_;
  Tensor<T> in_shape_;
  double margin_ = std::numeric_limits<double>::infinity();
};

/// Residual non-local block over all spatial positions:
///   q, k, g = 1x1 convs C -> C/2;  A = softmax_rows(q^T k / sqrt(C/2))
///   out = x + W_out(g A^T)
/// The key projection has no bias: a key bias shifts every logit in a row by
/// the same amount, which softmax cancels. W_out starts at zero so a fresh
/// block is the identity.
template <class T>
class AttentionBlock : public Layer<T> {
 public:
  AttentionBlock(std::string name, int channels, int max_positions = 4096)
      : Layer<T>(std::move(name)), c_(channels), cap_(max_positions),
        query_(this->name() + ".query", channels, channels / 2, 1),
        key_(this->name() + ".key", channels, channels / 2, 1, 1, false),
        value_(this->name() + ".value", channels, channels / 2, 1),
        out_(this->name() + ".out", channels / 2, channels, 1) {
    if (channels % 2) throw ParameterError(this->name(), "channel count must be even");
  }

  std::string kind() const override { return "attention"; }
  int max_positions() const { return cap_; }
  Conv2d<T>& query() { return query_; }
  Conv2d<T>& key() { return key_; }
  Conv2d<T>& value() { return value_; }
  Conv2d<T>& output() { return out_; }

  void init(Rng& rng) {
    query_.init_he_uniform(rng);
    key_.init_he_uniform(rng);
    value_.init_he_uniform(rng);
    out_.weight().value.fill(T(0));
    out_.bias()->value.fill(T(0));
  }

  std::vector<Param<T>*> params() override {
    std::vector<Param<T>*> p;
    for (Conv2d<T>* l : {&query_, &key_, &value_, &out_})
      for (Param<T>* q : l->params()) p.push_back(q);
    return p;
  }

  /// Attention weights of sample `i` from the last training forward.
  const RowMat<T>& attention(int i) const { return attn_.at(i); }

  // The P x P attention matrix is produced and consumed in bands of kBand
  // rows so each band stays in cache between the matrix products and the
  // softmax.
  static constexpr int kBand = 64;

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    const long positions = static_cast<long>(x.h) * x.w;
    if (positions > cap_)
      throw ParameterError(this->name(), std::to_string(x.h) + "x" + std::to_string(x.w) + " = " +
                                             std::to_string(positions) + " positions exceeds the attention cap of " +
                                             std::to_string(cap_) + "; downsample or tile the input");
    const int P = static_cast<int>(positions);
    Tensor<T> q = query_.forward(x, train);
    Tensor<T> k = key_.forward(x, train);
    Tensor<T> g = value_.forward(x, train);
    Tensor<T> mixed(x.n, c_ / 2, x.h, x.w);
    if (train) attn_.resize(x.n);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(c_ / 2)));
    RowMat<T> scratch;
    for (int i = 0; i < x.n; ++i) {
      const RowMat<T> qt = as_matrix(q, i).transpose();
      const auto K = as_matrix(k, i);
      const auto G = as_matrix(g, i);
      auto M = as_matrix(mixed, i);
      if (train) attn_[i].resize(P, P);
      else scratch.resize(std::min(kBand, P), P);
      for (int r0 = 0; r0 < P; r0 += kBand) {
        const int b = std::min(kBand, P - r0);
        auto band = train ? attn_[i].middleRows(r0, b) : scratch.topRows(b);
        band.noalias() = qt.middleRows(r0, b) * K;
        band *= scale;
        softmax_rows(band);
        M.middleCols(r0, b).noalias() = G * band.transpose();
      }
    }
    Tensor<T> y = out_.forward(mixed, train);
    for (std::size_t j = 0; j < y.size(); ++j) y.data[j] += x.data[j];
    if (train) {
      q_ = std::move(q);
      k_ = std::move(k);
      g_ = std::move(g);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool need_dx) override {
    if (static_cast<int>(attn_.size()) != dy.n) throw std::logic_error(this->name() + ": backward without forward");
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(c_ / 2)));
    const int P = dy.h * dy.w;
    Tensor<T> dmixed = out_.backward(dy, true);
    Tensor<T> dq(dy.n, c_ / 2, dy.h, dy.w), dk = dq, dg = dq;
    RowMat<T> dS(std::min(kBand, P), P);
    for (int i = 0; i < dy.n; ++i) {
      const RowMat<T>& A = attn_[i];
      const auto dM = as_matrix(dmixed, i);
      const RowMat<T> dMt = dM.transpose();
      const auto Q = as_matrix(q_, i);
      const auto K = as_matrix(k_, i);
      const auto G = as_matrix(g_, i);
      auto dQ = as_matrix(dq, i);
      auto dK = as_matrix(dk, i);
      auto dG = as_matrix(dg, i);
      for (int r0 = 0; r0 < P; r0 += kBand) {
        const int b = std::min(kBand, P - r0);
        const auto Ab = A.middleRows(r0, b);
        auto dSb = dS.topRows(b);
        dG.noalias() += dM.middleCols(r0, b) * Ab;
        dSb.noalias() = dMt.middleRows(r0, b) * G;  // d(loss)/dA
        // Softmax backward, row by row: dS = A * (dA - <dA, A>_row).
        const Eigen::Matrix<T, Eigen::Dynamic, 1> inner = (dSb.array() * Ab.array()).rowwise().sum();
        dSb.array() = Ab.array() * (dSb.array().colwise() - inner.array());
        dQ.middleCols(r0, b).noalias() = scale * (K * dSb.transpose());
        dK.noalias() += scale * (Q.middleCols(r0, b) * dSb);
      }
    }
    Tensor<T> dx_q = query_.backward(dq, need_dx);
    Tensor<T> dx_k = key_.backward(dk, need_dx);
    Tensor<T> dx_g = value_.backward(dg, need_dx);
    if (!need_dx) return {};
    Tensor<T> dx = dy;
    for (std::size_t j = 0; j < dx.size(); ++j) dx.data[j] += dx_q.data[j] + dx_k.data[j] + dx_g.data[j];
    return dx;
  }

  /// Row-wise softmax in place; works on any dense row-major block.
  template <class M>
  static void softmax_rows(M&& S) {
    const Eigen::Index cols = S.cols();
    for (Eigen::Index r = 0; r < S.rows(); ++r) {
      Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> row(S.row(r).data(), cols);
      row = (row - row.maxCoeff()).exp();
      row /= row.sum();
    }
  }

 private:
  int c_, cap_;
  Conv2d<T> query_, key_, value_, out_;
  std::vector<RowMat<T>> attn_;
  Tensor<T> q_, k_, g_;
};

}  // namespace crowdx
