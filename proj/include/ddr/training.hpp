#pragma once

// Contrastive training phases:
//   warm-up  full-parameter training of the backbone without prefixes, then freeze
//   general  only P^g; both sides use the passage encoder
//   domain   only P^d_i and W_r (plus P^g when joint training is requested)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ddr/encoder.hpp"
#include "ddr/loss.hpp"
#include "ddr/optim.hpp"
#include "ddr/random.hpp"
#include "ddr/routing.hpp"

namespace ddr {

class TrainingError : public Error {
 public:
  using Error::Error;
};

struct TrainExample {
  TokenIds query;
  std::string task_label;
  std::size_t positive = 0;
  /// Fixed negatives, always used. Any shortfall against the plan's negative
  /// count is sampled uniformly every epoch.
  std::vector<std::size_t> negatives;
  /// Other passages judged relevant; never drawn as negatives.
  std::vector<std::size_t> also_relevant;
};

struct TrainingData {
  std::vector<TokenIds> passages;
  std::vector<TrainExample> examples;
};

enum class TrainPhase { BackboneWarmup, General, Domain };

inline std::string to_string(TrainPhase p) {
  switch (p) {
    case TrainPhase::BackboneWarmup: return "backbone_warmup";
    case TrainPhase::General: return "general";
    case TrainPhase::Domain: return "domain";
  }
  return "?";
}

struct TrainPlan {
  TrainPhase phase = TrainPhase::General;
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  double learning_rate = 7e-3;
  std::uint64_t seed = 0;
  RoutingStrategy strategy = RoutingStrategy::soft();
  std::size_t num_negatives = 5;
  bool in_batch_negatives = false;
  /// Domain phase only: also update P^g, as the full objective allows.
  bool joint_general = false;

  static TrainPlan general_defaults() { return TrainPlan{TrainPhase::General, 1, 8, 7e-3}; }
  static TrainPlan domain_defaults() { return TrainPlan{TrainPhase::Domain, 1, 8, 7e-6}; }

  void validate() const {
    if (epochs < 1) throw Error("train plan: epochs must be >= 1");
    if (batch_size < 1) throw Error("train plan: batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw Error("train plan: learning_rate must be finite and non-negative");
    }
  }
};

struct LossPoint {
  std::size_t step;
  std::size_t epoch;
  double mean_loss;
};

struct TrainResult {
  std::vector<LossPoint> curve;
  std::vector<double> epoch_mean_loss;
};

/// Uniformly samples `count` distinct passage indices from [0, pool_size),
/// excluding the positive and anything in `excluded`.
inline std::vector<std::size_t> sample_negatives(std::size_t pool_size, std::size_t positive,
                                                 std::size_t count, std::uint64_t seed,
                                                 const std::vector<std::size_t>& excluded = {}) {
  std::set<std::size_t> banned(excluded.begin(), excluded.end());
  banned.insert(positive);
  std::vector<std::size_t> pool;
  pool.reserve(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i) {
    if (!banned.count(i)) pool.push_back(i);
  }
  if (pool.size() < count) {
    throw Error("sample_negatives: need " + std::to_string(count) + " negatives but only " +
                std::to_string(pool.size()) + " passages are eligible");
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.index(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

namespace detail {

/// Candidate list for one example: positive first, then its fixed negatives,
/// then uniform samples up to `plan.num_negatives`, then (optionally) the other
/// positives of the batch.
inline std::vector<std::size_t> candidates_for(const TrainExample& ex, const TrainPlan& plan,
                                               std::size_t num_passages, std::uint64_t seed,
                                               const std::vector<std::size_t>& batch_positives) {
  std::vector<std::size_t> out{ex.positive};
  out.insert(out.end(), ex.negatives.begin(), ex.negatives.end());
  if (plan.num_negatives > ex.negatives.size()) {
    std::vector<std::size_t> excluded = ex.also_relevant;
    excluded.insert(excluded.end(), ex.negatives.begin(), ex.negatives.end());
    auto extra = sample_negatives(num_passages, ex.positive, plan.num_negatives - ex.negatives.size(),
                                  seed, excluded);
    out.insert(out.end(), extra.begin(), extra.end());
  }
  if (plan.in_batch_negatives) {
    std::set<std::size_t> seen(out.begin(), out.end());
    seen.insert(ex.also_relevant.begin(), ex.also_relevant.end());
    for (std::size_t p : batch_positives) {
      if (seen.insert(p).second) out.push_back(p);
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>*> general_params(PrefixBank<T>& bank) {
  std::vector<Tensor<T>*> out;
  bank.for_each_general([&](Tensor<T>& t) { out.push_back(&t); });
  return out;
}

template <typename T>
std::vector<Tensor<T>*> domain_params(PrefixBank<T>& bank, Tensor<T>& router) {
  std::vector<Tensor<T>*> out;
  bank.for_each_domain([&](Tensor<T>& t) { out.push_back(&t); });
  out.push_back(&router);
  return out;
}

template <typename T>
std::vector<Tensor<T>*> backbone_params(Backbone<T>& b) {
  std::vector<Tensor<T>*> out;
  b.for_each([&](Tensor<T>& t) { out.push_back(&t); });
  return out;
}

inline std::string describe_batch(const std::vector<std::size_t>& batch, std::size_t epoch,
                                  std::size_t step) {
  std::ostringstream os;
  os << "non-finite loss at epoch " << epoch << " step " << step << " (examples";
  for (std::size_t i : batch) os << ' ' << i;
  os << ')';
  return os.str();
}

/// Runs the epoch/batch loop. `step_fn(batch, epoch, step, grads)` returns the
/// summed loss over the batch and accumulates summed gradients.
template <typename T, typename StepFn>
TrainResult run_epochs(std::size_t num_examples, const TrainPlan& plan,
                       std::vector<Tensor<T>*> params, std::vector<Tensor<T>*> grad_params,
                       Gradients<T>& grads, StepFn&& step_fn) {
  TrainResult result;
  auto state = OptimizerState<T>::for_params(params, AdamConfig{plan.learning_rate});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < plan.epochs; ++epoch) {
    std::vector<std::size_t> order(num_examples);
    for (std::size_t i = 0; i < num_examples; ++i) order[i] = i;
    Rng shuffle_rng(Rng::mix(plan.seed, 1000 + epoch));
    shuffle_rng.shuffle(order);
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < num_examples; start += plan.batch_size) {
      const std::size_t end = std::min(num_examples, start + plan.batch_size);
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      for (Tensor<T>* g : grads.tensors()) g->fill(T{0});
      const double batch_loss = step_fn(batch, epoch, step, grads);
      if (!std::isfinite(batch_loss)) throw TrainingError(describe_batch(batch, epoch, step));
      grads.scale(T{1} / static_cast<T>(batch.size()));
      adam_step<T>(params, grad_params, state);
      result.curve.push_back({step, epoch, batch_loss / static_cast<double>(batch.size())});
      epoch_total += batch_loss;
      ++step;
    }
    result.epoch_mean_loss.push_back(num_examples ? epoch_total / static_cast<double>(num_examples)
                                                  : 0.0);
  }
  return result;
}

inline std::uint64_t negative_seed(std::uint64_t seed, std::size_t epoch, std::size_t example) {
  return Rng::mix(Rng::mix(seed, 2000 + epoch), example);
}

/// One contrastive batch. Every distinct candidate passage is encoded once;
/// its gradient is summed over the queries that saw it and back-propagated
/// once. `encode_q(i)` and `encode_p(p)` return encodings; the passage side
/// is back-propagated only when `passage_trainable`.
template <typename T, typename QueryFn, typename PassageFn, typename BackwardFn>
double contrastive_batch(const std::vector<std::size_t>& batch, std::size_t epoch,
                         const TrainingData& data, const TrainPlan& plan, QueryFn&& encode_q,
                         PassageFn&& encode_p, bool passage_trainable, BackwardFn&& backward) {
  std::vector<std::size_t> batch_positives;
  for (std::size_t i : batch) batch_positives.push_back(data.examples[i].positive);
  std::vector<std::vector<std::size_t>> cands;
  std::vector<std::size_t> unique;
  std::map<std::size_t, std::size_t> slot;
  for (std::size_t i : batch) {
    cands.push_back(candidates_for(data.examples[i], plan, data.passages.size(),
                                   negative_seed(plan.seed, epoch, i), batch_positives));
    for (std::size_t p : cands.back()) {
      if (slot.emplace(p, unique.size()).second) unique.push_back(p);
    }
  }
  std::vector<Encoding<T>> passages;
  passages.reserve(unique.size());
  for (std::size_t p : unique) passages.push_back(encode_p(p));
  std::vector<Tensor<T>> passage_grads;
  if (passage_trainable) {
    for (const auto& e : passages) passage_grads.push_back(Tensor<T>(e.embedding.shape()));
  }
  double total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto q = encode_q(batch[b]);
    std::vector<Tensor<T>> embs;
    for (std::size_t p : cands[b]) embs.push_back(passages[slot.at(p)].embedding);
    auto l = info_nce_loss<T>(q.embedding, embs, 0);
    total += static_cast<double>(l.loss);
    backward(q.tape, l.grad_query);
    if (passage_trainable) {
      for (std::size_t j = 0; j < cands[b].size(); ++j) {
        add_into(l.grad_candidates[j], passage_grads[slot.at(cands[b][j])]);
      }
    }
  }
  if (passage_trainable) {
    for (std::size_t u = 0; u < unique.size(); ++u) backward(passages[u].tape, passage_grads[u]);
  }
  return total;
}

}  // namespace detail

/// Phase 1: trains only the general prefix. Queries and passages both go
/// through the passage encoder, so domain prefixes and the router are untouched.
template <typename T>
TrainResult train_general(Model<T>& model, const TrainingData& data, const TrainPlan& plan) {
  plan.validate();
  if (plan.phase != TrainPhase::General) throw Error("train_general: plan phase must be general");
  if (!model.backbone.frozen) throw Error("train_general: backbone must be frozen first");
  const auto& c = model.config;
  Gradients<T> grads = Gradients<T>::zeros(c);
  auto params = detail::general_params(model.prefixes);
  auto grad_params = detail::general_params(grads.prefixes);

  auto step_fn = [&](const std::vector<std::size_t>& batch, std::size_t epoch, std::size_t,
                     Gradients<T>& g) {
    return detail::contrastive_batch<T>(
        batch, epoch, data, plan,
        [&](std::size_t i) { return encode_passage(data.examples[i].query, c, model.backbone, model.prefixes); },
        [&](std::size_t p) { return encode_passage(data.passages[p], c, model.backbone, model.prefixes); },
        true, [&](const ActivationTape<T>& tape, const Tensor<T>& grad) {
          encoder_backward(tape, grad, model, g);
        });
  };
  return detail::run_epochs<T>(data.examples.size(), plan, params, grad_params, grads, step_fn);
}

/// Phase 2: trains the domain prefixes and the router under the plan's routing
/// strategy. The general prefix stays fixed unless `plan.joint_general`.
template <typename T>
TrainResult train_domain(Model<T>& model, const TrainingData& data, const DomainMap& domain_map,
                         const TrainPlan& plan) {
  plan.validate();
  if (plan.phase != TrainPhase::Domain) throw Error("train_domain: plan phase must be domain");
  if (!model.backbone.frozen) throw Error("train_domain: backbone must be frozen first");
  const auto& c = model.config;
  plan.strategy.validate(c.num_domains);
  model.router.strategy = plan.strategy;

  std::vector<const std::vector<std::size_t>*> task_domains(data.examples.size(), nullptr);
  for (std::size_t i = 0; i < data.examples.size(); ++i) {
    const auto& label = data.examples[i].task_label;
    if (!label.empty() && domain_map.has_task(label)) task_domains[i] = &domain_map.lookup(label);
    if (plan.strategy.needs_task_domains() && !task_domains[i]) {
      throw Error("train_domain: strategy '" + plan.strategy.name() + "' needs a task label, " +
                  "example " + std::to_string(i) + " has " +
                  (label.empty() ? std::string("none") : "unknown label '" + label + "'"));
    }
  }

  Gradients<T> grads = Gradients<T>::zeros(c);
  auto params = detail::domain_params(model.prefixes, model.router.weights);
  auto grad_params = detail::domain_params(grads.prefixes, grads.router);
  if (plan.joint_general) {
    for (Tensor<T>* t : detail::general_params(model.prefixes)) params.push_back(t);
    for (Tensor<T>* t : detail::general_params(grads.prefixes)) grad_params.push_back(t);
  }

  // With P^g fixed the passage side is constant, so embeddings are computed once.
  std::vector<Tensor<T>> cached;
  if (!plan.joint_general) {
    cached.reserve(data.passages.size());
    for (const auto& p : data.passages) {
      cached.push_back(encode_passage(p, c, model.backbone, model.prefixes).embedding);
    }
  }

  auto step_fn = [&](const std::vector<std::size_t>& batch, std::size_t epoch, std::size_t,
                     Gradients<T>& g) {
    return detail::contrastive_batch<T>(
        batch, epoch, data, plan,
        [&](std::size_t i) {
          return encode_query(data.examples[i].query, c, model.backbone, model.prefixes,
                              model.router, task_domains[i]);
        },
        [&](std::size_t p) {
          if (plan.joint_general) return encode_passage(data.passages[p], c, model.backbone, model.prefixes);
          return Encoding<T>{cached[p], {}};
        },
        plan.joint_general, [&](const ActivationTape<T>& tape, const Tensor<T>& grad) {
          encoder_backward(tape, grad, model, g);
        });
  };
  return detail::run_epochs<T>(data.examples.size(), plan, params, grad_params, grads, step_fn);
}

/// Optional warm-up: trains every backbone weight contrastively with no
/// prefixes, then freezes the backbone permanently.
template <typename T>
TrainResult pretrain_backbone(Model<T>& model, const TrainingData& data, const TrainPlan& plan) {
  plan.validate();
  if (plan.phase != TrainPhase::BackboneWarmup) {
    throw Error("pretrain_backbone: plan phase must be backbone_warmup");
  }
  if (model.backbone.frozen) throw Error("pretrain_backbone: backbone is already frozen");
  const auto& c = model.config;
  Gradients<T> grads = Gradients<T>::zeros(c, /*with_backbone=*/true);
  auto params = detail::backbone_params(model.backbone);
  auto grad_params = detail::backbone_params(*grads.backbone);

  auto step_fn = [&](const std::vector<std::size_t>& batch, std::size_t epoch, std::size_t,
                     Gradients<T>& g) {
    return detail::contrastive_batch<T>(
        batch, epoch, data, plan,
        [&](std::size_t i) { return encode_plain(data.examples[i].query, c, model.backbone); },
        [&](std::size_t p) { return encode_plain(data.passages[p], c, model.backbone); }, true,
        [&](const ActivationTape<T>& tape, const Tensor<T>& grad) {
          encoder_backward(tape, grad, model, g);
        });
  };
  auto result =
      detail::run_epochs<T>(data.examples.size(), plan, params, grad_params, grads, step_fn);
  model.backbone.frozen = true;
  return result;
}

}  // namespace ddr
