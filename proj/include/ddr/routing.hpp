#pragma once

// Routing distribution over domain modules and the strategies that turn it
// into mixing weights for the query prefix.

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ddr/config.hpp"
#include "ddr/ops.hpp"
#include "ddr/prefix_bank.hpp"
#include "ddr/tensor.hpp"

namespace ddr {

struct RoutingStrategy {
  enum class Kind {
    Soft,          // every module weighted by beta
    TopK,          // the k largest beta entries survive
    Prior,         // the task's labelled domains survive
    UniformPrior,  // labelled domains, uniform weights, router unused ("w/o routing")
    AllSoft,       // every module weighted by beta, labels unused ("w/o prior")
  };

  Kind kind = Kind::Soft;
  std::size_t k = 1;
  /// Rescale surviving weights to sum to one (Mixtral-style). Off by default.
  bool renormalize = false;

  static RoutingStrategy soft() { return {Kind::Soft}; }
  static RoutingStrategy top_k(std::size_t k) { return {Kind::TopK, k}; }
  static RoutingStrategy prior() { return {Kind::Prior}; }
  static RoutingStrategy uniform_prior() { return {Kind::UniformPrior}; }
  static RoutingStrategy all_soft() { return {Kind::AllSoft}; }

  bool needs_task_domains() const { return kind == Kind::Prior || kind == Kind::UniformPrior; }
  bool uses_router() const { return kind != Kind::UniformPrior; }

  void validate(std::size_t num_domains) const {
    if (kind == Kind::TopK && (k < 1 || k > num_domains)) {
      throw Error("top-k routing: k=" + std::to_string(k) + " outside [1, " +
                  std::to_string(num_domains) + "]");
    }
  }

  std::string name() const {
    switch (kind) {
      case Kind::Soft: return "soft";
      case Kind::TopK: return "topk:" + std::to_string(k);
      case Kind::Prior: return "prior";
      case Kind::UniformPrior: return "uniform_prior";
      case Kind::AllSoft: return "all_soft";
    }
    return "?";
  }

  /// Accepts "soft", "topk:<k>", "prior", "uniform_prior", "all_soft".
  static RoutingStrategy parse(const std::string& s) {
    if (s == "soft") return soft();
    if (s == "prior") return prior();
    if (s == "uniform_prior") return uniform_prior();
    if (s == "all_soft") return all_soft();
    if (s.rfind("topk:", 0) == 0) {
      const std::string digits = s.substr(5);
      if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit)) {
        throw Error("bad top-k strategy '" + s + "'");
      }
      return top_k(std::stoul(digits));
    }
    throw Error("unknown routing strategy '" + s + "'");
  }

  friend bool operator==(const RoutingStrategy&, const RoutingStrategy&) = default;
};

/// Router parameters W_r [N x d], shared by every layer, plus the active strategy.
template <typename T>
struct Router {
  Tensor<T> weights;
  RoutingStrategy strategy;

  static Router zeros(const ModelConfig& c, RoutingStrategy strategy = {}) {
    return {Tensor<T>({c.num_domains, c.model_dim}), strategy};
  }

  void validate(const ModelConfig& c) const {
    require_shape(weights, {c.num_domains, c.model_dim}, "router weights");
    require_finite(weights, "router weights");
    strategy.validate(c.num_domains);
  }
};

/// Task label -> set of domain indices (the instruction-domain mapping).
class DomainMap {
 public:
  DomainMap() = default;
  explicit DomainMap(std::vector<std::string> domains) : domains_(std::move(domains)) {
    for (std::size_t i = 0; i < domains_.size(); ++i) {
      if (!index_.emplace(domains_[i], i).second) {
        throw Error("domain map: duplicate domain '" + domains_[i] + "'");
      }
    }
  }

  const std::vector<std::string>& domains() const { return domains_; }
  const std::map<std::string, std::vector<std::size_t>>& tasks() const { return tasks_; }
  std::size_t num_domains() const { return domains_.size(); }

  std::size_t domain_index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("domain map: unknown domain '" + name + "'");
    return it->second;
  }

  void add_task(const std::string& task, const std::vector<std::string>& domain_names) {
    if (domain_names.empty()) throw Error("domain map: task '" + task + "' has no domains");
    std::set<std::size_t> ids;
    for (const auto& n : domain_names) ids.insert(domain_index(n));
    if (!tasks_.emplace(task, std::vector<std::size_t>(ids.begin(), ids.end())).second) {
      throw Error("domain map: duplicate task '" + task + "'");
    }
  }

  bool has_task(const std::string& task) const { return tasks_.count(task) != 0; }

  const std::vector<std::size_t>& lookup(const std::string& task) const {
    auto it = tasks_.find(task);
    if (it == tasks_.end()) throw Error("domain map: unknown task label '" + task + "'");
    return it->second;
  }

  void validate(std::size_t num_domains) const {
    if (domains_.size() != num_domains) {
      throw Error("domain map declares " + std::to_string(domains_.size()) +
                  " domains but the model has " + std::to_string(num_domains));
    }
  }

  friend bool operator==(const DomainMap& a, const DomainMap& b) {
    return a.domains_ == b.domains_ && a.tasks_ == b.tasks_;
  }

 private:
  std::vector<std::string> domains_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::vector<std::size_t>> tasks_;
};

/// beta = softmax(W_r x).
template <typename T>
Tensor<T> route_distribution(std::span<const T> x, const Tensor<T>& router_weights) {
  Tensor<T> beta = matvec(router_weights, x);
  softmax_inplace(beta.span());
  return beta;
}

template <typename T>
Tensor<T> route_distribution(const Tensor<T>& x, const Router<T>& router) {
  return route_distribution<T>(x.span(), router.weights);
}

/// Mixing weights plus the active mask needed to differentiate them.
template <typename T>
struct Selection {
  Tensor<T> weights;
  std::vector<char> active;
};

/// Indices of the k largest entries; ties go to the lower index.
template <typename T>
std::vector<std::size_t> top_k_indices(std::span<const T> beta, std::size_t k) {
  std::vector<std::size_t> order(beta.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return beta[a] > beta[b]; });
  order.resize(std::min(k, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

template <typename T>
Selection<T> select_active(const Tensor<T>& beta, const RoutingStrategy& strategy,
                           const std::vector<std::size_t>* task_domains = nullptr) {
  using Kind = RoutingStrategy::Kind;
  const std::size_t n = beta.size();
  Selection<T> sel{Tensor<T>({n}), std::vector<char>(n, 0)};
  if (strategy.needs_task_domains()) {
    if (!task_domains) throw Error("routing strategy '" + strategy.name() + "' needs task domains");
    for (std::size_t i : *task_domains) {
      if (i >= n) throw Error("task domain index " + std::to_string(i) + " out of range");
      sel.active[i] = 1;
    }
  }
  switch (strategy.kind) {
    case Kind::Soft:
    case Kind::AllSoft:
      sel.active.assign(n, 1);
      break;
    case Kind::TopK:
      strategy.validate(n);
      for (std::size_t i : top_k_indices<T>(beta.span(), strategy.k)) sel.active[i] = 1;
      break;
    case Kind::Prior:
      break;
    case Kind::UniformPrior: {
      const T share = T{1} / static_cast<T>(task_domains->size());
      for (std::size_t i = 0; i < n; ++i) sel.weights[i] = sel.active[i] ? share : T{0};
      return sel;
    }
  }
  for (std::size_t i = 0; i < n; ++i) sel.weights[i] = sel.active[i] ? beta[i] : T{0};
  if (strategy.renormalize && strategy.kind != Kind::Soft && strategy.kind != Kind::AllSoft) {
    T total{0};
    for (std::size_t i = 0; i < n; ++i) total += sel.weights[i];
    for (std::size_t i = 0; i < n; ++i) sel.weights[i] /= total;
  }
  return sel;
}

/// d loss / d beta given d loss / d weights. The discrete selection is held fixed.
template <typename T>
Tensor<T> select_active_backward(const Tensor<T>& beta, const Selection<T>& sel,
                                 const RoutingStrategy& strategy, const Tensor<T>& dweights) {
  using Kind = RoutingStrategy::Kind;
  const std::size_t n = beta.size();
  Tensor<T> dbeta({n});
  if (strategy.kind == Kind::UniformPrior) return dbeta;
  const bool renorm =
      strategy.renormalize && strategy.kind != Kind::Soft && strategy.kind != Kind::AllSoft;
  if (!renorm) {
    for (std::size_t i = 0; i < n; ++i) dbeta[i] = sel.active[i] ? dweights[i] : T{0};
    return dbeta;
  }
  T total{0}, inner{0};
  for (std::size_t i = 0; i < n; ++i) {
    if (!sel.active[i]) continue;
    total += beta[i];
    inner += dweights[i] * sel.weights[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    dbeta[i] = sel.active[i] ? (dweights[i] - inner) / total : T{0};
  }
  return dbeta;
}

namespace detail {

template <typename T>
void mix_domains(const std::vector<std::vector<PrefixPair<T>>>& domains, std::size_t layer,
                 std::span<const T> weights, std::size_t heads, std::size_t len,
                 std::size_t head_dim, std::size_t dst_offset, PrefixPair<T>& out) {
  for (std::size_t d = 0; d < domains.size(); ++d) {
    const T w = weights[d];
    if (w == T{0}) continue;
    const auto& src = domains[d][layer];
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t s = 0; s < len; ++s) {
        for (std::size_t e = 0; e < head_dim; ++e) {
          out.key(h, dst_offset + s, e) += w * src.key(h, s, e);
          out.value(h, dst_offset + s, e) += w * src.value(h, s, e);
        }
      }
    }
  }
}

}  // namespace detail

/// Query prefix for one layer: the general prefix combined with the weighted
/// domain mixture (concatenated or summed per the model config).
template <typename T>
PrefixPair<T> compose_prefix(std::span<const T> weights, const PrefixBank<T>& bank,
                             std::size_t layer, const ModelConfig& c) {
  if (weights.size() != bank.domains.size()) {
    throw ShapeError("compose_prefix: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(bank.domains.size()) + " domains");
  }
  if (layer >= bank.general.size()) throw ShapeError("compose_prefix: layer out of range");
  const std::size_t H = c.num_heads, dh = c.head_dim;
  const std::size_t lg = c.general_prefix_len, ld = c.domain_prefix_len;
  const auto& g = bank.general[layer];
  if (c.query_prefix_mode == QueryPrefixMode::Additive) {
    PrefixPair<T> out = g;
    detail::mix_domains(bank.domains, layer, weights, H, ld, dh, 0, out);
    return out;
  }
  PrefixPair<T> out = PrefixPair<T>::zeros(H, lg + ld, dh);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t s = 0; s < lg; ++s) {
      for (std::size_t e = 0; e < dh; ++e) {
        out.key(h, s, e) = g.key(h, s, e);
        out.value(h, s, e) = g.value(h, s, e);
      }
    }
  }
  detail::mix_domains(bank.domains, layer, weights, H, ld, dh, lg, out);
  return out;
}

/// Backward of compose_prefix. Accumulates prefix gradients into `grads` and
/// returns d loss / d weights.
template <typename T>
Tensor<T> compose_prefix_backward(std::span<const T> weights, const PrefixBank<T>& bank,
                                  std::size_t layer, const ModelConfig& c,
                                  const PrefixPair<T>& dprefix, PrefixBank<T>& grads) {
  const std::size_t H = c.num_heads, dh = c.head_dim;
  const std::size_t lg = c.general_prefix_len, ld = c.domain_prefix_len;
  const std::size_t offset = c.query_prefix_mode == QueryPrefixMode::Additive ? 0 : lg;
  auto& gg = grads.general[layer];
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t s = 0; s < lg; ++s) {
      for (std::size_t e = 0; e < dh; ++e) {
        gg.key(h, s, e) += dprefix.key(h, s, e);
        gg.value(h, s, e) += dprefix.value(h, s, e);
      }
    }
  }
  const std::size_t n = bank.domains.size();
  Tensor<T> dweights({n});
  for (std::size_t d = 0; d < n; ++d) {
    const T w = weights[d];
    const auto& src = bank.domains[d][layer];
    auto& dst = grads.domains[d][layer];
    T acc{0};
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t s = 0; s < ld; ++s) {
        for (std::size_t e = 0; e < dh; ++e) {
          const T dk = dprefix.key(h, offset + s, e);
          const T dv = dprefix.value(h, offset + s, e);
          acc += dk * src.key(h, s, e) + dv * src.value(h, s, e);
          dst.key(h, s, e) += w * dk;
          dst.value(h, s, e) += w * dv;
        }
      }
    }
    dweights[d] = acc;
  }
  return dweights;
}

}  // namespace ddr
