#pragma once

// Dense kernels used by the encoder, each paired with its backward.
// Every reduction runs left to right in index order; no kernel reassociates
// a sum, so results are bit-reproducible for a given scalar type.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <string>

#include "ddr/tensor.hpp"

namespace ddr {

namespace detail {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected a matrix, got shape " +
                     shape_string(t.shape()));
  }
}

}  // namespace detail

/// c = a * b for a[m x k], b[k x n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T* out = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a(i, p);
      const T* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += aip * brow[j];
    }
  }
  return c;
}

/// c = a^T * b for a[k x m], b[k x n]. Used for weight gradients.
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul_tn");
  detail::require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: row counts disagree for " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  Tensor<T> c({m, n});
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a.data() + p * m;
    const T* brow = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = arow[i];
      T* out = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += api * brow[j];
    }
  }
  return c;
}

/// c = a * b^T for a[m x k], b[n x k].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: column counts disagree for " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.data() + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c(i, j) = acc;
    }
  }
  return c;
}

/// y = W x for W[n x d], x[d].
template <typename T>
Tensor<T> matvec(const Tensor<T>& w, std::span<const T> x) {
  detail::require_matrix(w, "matvec");
  if (w.cols() != x.size()) {
    throw ShapeError("matvec: matrix " + shape_string(w.shape()) + " against vector of length " +
                     std::to_string(x.size()));
  }
  Tensor<T> y({w.rows()});
  for (std::size_t i = 0; i < w.rows(); ++i) y[i] = dot(w.row(i), x);
  return y;
}

template <typename T>
void softmax_inplace(std::span<T> v) {
  if (v.empty()) throw ShapeError("softmax: empty vector");
  const T peak = *std::max_element(v.begin(), v.end());
  T total{0};
  for (T& x : v) {
    x = std::exp(x - peak);
    total += x;
  }
  for (T& x : v) x /= total;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& v) {
  Tensor<T> out = v;
  softmax_inplace(out.span());
  return out;
}

/// dx = y * (dy - <y, dy>) given the softmax output y.
template <typename T>
void softmax_backward(std::span<const T> y, std::span<const T> dy, std::span<T> dx) {
  const T inner = dot(y, dy);
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] * (dy[i] - inner);
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row statistics kept for the backward pass.
template <typename T>
struct LayerNormCache {
  std::vector<T> mean;
  std::vector<T> rstd;
};

template <typename T>
void layer_norm_row(std::span<const T> x, std::span<const T> gain, std::span<const T> bias,
                    T eps, std::span<T> y, T* mean_out = nullptr, T* rstd_out = nullptr) {
  const std::size_t d = x.size();
  if (d == 0) throw ShapeError("layer_norm: empty vector");
  if (gain.size() != d || bias.size() != d || y.size() != d) {
    throw ShapeError("layer_norm: gain/bias length mismatch");
  }
  T mean{0};
  for (T v : x) mean += v;
  mean /= static_cast<T>(d);
  T var{0};
  for (T v : x) var += (v - mean) * (v - mean);
  var /= static_cast<T>(d);
  const T rstd = T{1} / std::sqrt(var + eps);
  for (std::size_t i = 0; i < d; ++i) y[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
  if (mean_out) *mean_out = mean;
  if (rstd_out) *rstd_out = rstd;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = static_cast<T>(kLayerNormEps)) {
  if (!(eps > T{0})) throw Error("layer_norm: eps must be positive");
  Tensor<T> y(x.shape());
  layer_norm_row<T>(x.span(), gain.span(), bias.span(), eps, y.span());
  return y;
}

/// Row-wise layer norm over a [rows x d] matrix.
template <typename T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                          LayerNormCache<T>& cache, T eps = static_cast<T>(kLayerNormEps)) {
  Tensor<T> y(x.shape());
  cache.mean.assign(x.rows(), T{0});
  cache.rstd.assign(x.rows(), T{0});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    layer_norm_row<T>(x.row(r), gain.span(), bias.span(), eps, y.row(r), &cache.mean[r],
                      &cache.rstd[r]);
  }
  return y;
}

/// Backward of layer_norm_rows. Accumulates into dgain/dbias when given.
template <typename T>
Tensor<T> layer_norm_rows_backward(const Tensor<T>& x, const Tensor<T>& gain,
                                   const LayerNormCache<T>& cache, const Tensor<T>& dy,
                                   Tensor<T>* dgain, Tensor<T>* dbias) {
  const std::size_t rows = x.rows(), d = x.cols();
  Tensor<T> dx(x.shape());
  std::vector<T> xhat(d), dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    const T mean = cache.mean[r], rstd = cache.rstd[r];
    T sum_dxhat{0}, sum_dxhat_xhat{0};
    for (std::size_t i = 0; i < d; ++i) {
      xhat[i] = (x(r, i) - mean) * rstd;
      dxhat[i] = dy(r, i) * gain[i];
      sum_dxhat += dxhat[i];
      sum_dxhat_xhat += dxhat[i] * xhat[i];
      if (dgain) (*dgain)[i] += dy(r, i) * xhat[i];
      if (dbias) (*dbias)[i] += dy(r, i);
    }
    const T inv_d = T{1} / static_cast<T>(d);
    for (std::size_t i = 0; i < d; ++i) {
      dx(r, i) = rstd * (dxhat[i] - sum_dxhat * inv_d - xhat[i] * sum_dxhat_xhat * inv_d);
    }
  }
  return dx;
}

namespace detail {
template <typename T>
constexpr T kGeluScale = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluCubic = static_cast<T>(0.044715);
}  // namespace detail

/// Tanh-approximated GELU.
template <typename T>
T gelu(T x) {
  const T u = detail::kGeluScale<T> * (x + detail::kGeluCubic<T> * x * x * x);
  return T{0.5} * x * (T{1} + std::tanh(u));
}

template <typename T>
T gelu_derivative(T x) {
  const T u = detail::kGeluScale<T> * (x + detail::kGeluCubic<T> * x * x * x);
  const T t = std::tanh(u);
  const T du = detail::kGeluScale<T> * (T{1} + T{3} * detail::kGeluCubic<T> * x * x);
  return T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t * t) * du;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu(x[i]);
  return y;
}

/// Per-coordinate (f(x + h e_i) - f(x - h e_i)) / 2h.
template <typename T>
Tensor<T> central_difference_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x,
                                  T h = static_cast<T>(1e-4)) {
  Tensor<T> grad(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T original = probe[i];
    probe[i] = original + h;
    const T plus = f(probe);
    probe[i] = original - h;
    const T minus = f(probe);
    probe[i] = original;
    if (!std::isfinite(plus) || !std::isfinite(minus)) {
      throw NonFiniteError("central_difference_grad: non-finite evaluation at coordinate " +
                           std::to_string(i));
    }
    grad[i] = (plus - minus) / (T{2} * h);
  }
  return grad;
}

}  // namespace ddr
