#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ddr/tensor.hpp"

namespace ddr {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;

  static OptimizerState for_params(std::span<Tensor<T>* const> params, AdamConfig config) {
    OptimizerState s;
    s.config = config;
    for (const Tensor<T>* p : params) {
      s.first_moment.emplace_back(p->shape());
      s.second_moment.emplace_back(p->shape());
    }
    return s;
  }
};

/// Bias-corrected Adam update.
template <typename T>
void adam_step(std::span<Tensor<T>* const> params, std::span<Tensor<T>* const> grads,
               OptimizerState<T>& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  }
  state.step += 1;
  const auto& hp = state.config;
  const T b1 = static_cast<T>(hp.beta1), b2 = static_cast<T>(hp.beta2);
  const T correction1 = static_cast<T>(1.0 - std::pow(hp.beta1, static_cast<double>(state.step)));
  const T correction2 = static_cast<T>(1.0 - std::pow(hp.beta2, static_cast<double>(state.step)));
  const T lr = static_cast<T>(hp.learning_rate), eps = static_cast<T>(hp.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    const Tensor<T>& g = *grads[i];
    Tensor<T>& m = state.first_moment[i];
    Tensor<T>& v = state.second_moment[i];
    if (p.shape() != g.shape() || p.shape() != m.shape()) {
      throw ShapeError("adam_step: shape mismatch " + shape_string(p.shape()) + " vs " +
                       shape_string(g.shape()));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T{1} - b1) * g[j];
      v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
      const T mhat = m[j] / correction1;
      const T vhat = v[j] / correction2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace ddr
