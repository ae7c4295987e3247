#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "ddr/tensor.hpp"

namespace ddr {

template <typename T>
struct ContrastiveLoss {
  T loss{0};
  std::vector<T> scores;
  Tensor<T> grad_query;
  std::vector<Tensor<T>> grad_candidates;
};

/// InfoNCE over inner-product scores:
///   loss = -log( exp(s(q, p+)) / sum_j exp(s(q, p_j)) ),
/// where the candidate list includes the positive.
template <typename T>
ContrastiveLoss<T> info_nce_loss(const Tensor<T>& query, std::span<const Tensor<T>> candidates,
                                 std::size_t positive_index) {
  if (candidates.empty()) throw Error("info_nce_loss: no candidates");
  if (positive_index >= candidates.size()) throw Error("info_nce_loss: positive index out of range");
  const std::size_t k = candidates.size(), d = query.size();
  ContrastiveLoss<T> out;
  out.scores.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    if (candidates[j].size() != d) throw ShapeError("info_nce_loss: candidate dimension mismatch");
    out.scores[j] = dot(query.span(), candidates[j].span());
  }
  if (!all_finite<T>(out.scores)) throw NonFiniteError("info_nce_loss: non-finite score");

  const T peak = *std::max_element(out.scores.begin(), out.scores.end());
  std::vector<T> prob(k);
  T total{0};
  for (std::size_t j = 0; j < k; ++j) {
    prob[j] = std::exp(out.scores[j] - peak);
    total += prob[j];
  }
  for (auto& p : prob) p /= total;
  out.loss = (std::log(total) + peak) - out.scores[positive_index];

  out.grad_query = Tensor<T>({d});
  out.grad_candidates.reserve(k);
  for (std::size_t j = 0; j < k; ++j) {
    const T ds = prob[j] - (j == positive_index ? T{1} : T{0});
    axpy<T>(ds, candidates[j].span(), out.grad_query.span());
    Tensor<T> g({d});
    axpy<T>(ds, query.span(), g.span());
    out.grad_candidates.push_back(std::move(g));
  }
  return out;
}

}  // namespace ddr
