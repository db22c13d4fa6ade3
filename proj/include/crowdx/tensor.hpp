#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "crowdx/error.hpp"

namespace crowdx {

/// Storage aligned to Eigen's widest packet. With plain malloc alignment the
/// vectorized kernels pick a different peeling (and summation order) for each
/// allocation, so identical runs would drift apart in the last bits.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense NCHW array. float for training, double for gradient checks.
template <class T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  AlignedVector<T> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t sample_size() const { return c * plane(); }

  T* sample(int i) { return data.data() + i * sample_size(); }
  const T* sample(int i) const { return data.data() + i * sample_size(); }

  T& at(int in, int ic, int y, int x) { return data[((static_cast<std::size_t>(in) * c + ic) * h + y) * w + x]; }
  T at(int in, int ic, int y, int x) const {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + y) * w + x];
  }

  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
  std::string shape_string() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
  void fill(T v) { std::fill(data.begin(), data.end(), v); }
};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// Sample `i` viewed as a (channels x positions) matrix.
template <class T>
MatMap<T> as_matrix(Tensor<T>& t, int i) {
  return MatMap<T>(t.sample(i), t.c, static_cast<Eigen::Index>(t.plane()));
}
template <class T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, int i) {
  return ConstMatMap<T>(t.sample(i), t.c, static_cast<Eigen::Index>(t.plane()));
}

/// A learnable tensor with its gradient accumulator.
template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string name_, int n, int c, int h, int w)
      : name(std::move(name_)), value(n, c, h, w), grad(n, c, h, w) {}
};

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const std::string& what) {
  if (!a.same_shape(b))
    throw ParameterError(what, "shape mismatch: expected " + a.shape_string() + ", got " + b.shape_string());
}

/// 0.5 * batch-mean of the per-image sum of squared differences. When `grad`
/// is given it receives d(loss)/d(pred).
template <class T>
double loss_l2(const Tensor<T>& pred, const Tensor<T>& target, Tensor<T>* grad = nullptr) {
  require_same_shape(pred, target, "target");
  if (pred.n == 0) throw ParameterError("pred", "empty batch");
  const double inv_n = 1.0 / pred.n;
  double sum = 0.0;
  if (grad) *grad = Tensor<T>(pred.n, pred.c, pred.h, pred.w);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred.data[i]) - static_cast<double>(target.data[i]);
    sum += d * d;
    if (grad) grad->data[i] = static_cast<T>(d * inv_n);
  }
  return 0.5 * sum * inv_n;
}

}  // namespace crowdx
