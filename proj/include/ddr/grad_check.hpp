#pragma once

// Finite-difference check of the prefix and router gradients on a small
// contrastive problem: one routed query against a handful of passages.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ddr/encoder.hpp"
#include "ddr/loss.hpp"
#include "ddr/ops.hpp"
#include "ddr/random.hpp"

namespace ddr {

struct GradCheckOptions {
  double step = 1e-4;
  /// Denominator floor of the relative error, so exact zeros compare cleanly.
  double floor = 1e-6;
  std::size_t query_len = 4;
  std::size_t passage_len = 4;
  std::size_t num_candidates = 3;
  /// Larger than the training init so every nonlinearity is exercised.
  double prefix_std = 0.5;
  double router_std = 1.0;
  double backbone_std = 0.3;
  /// Layer-norm gains are drawn around this value. Smaller gains keep the
  /// scores small, which keeps roundoff in the differenced loss small.
  double gain_offset = 0.5;
};

struct GradCheckResult {
  std::string strategy;
  std::uint64_t seed = 0;
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t coordinates = 0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// A small randomized model and batch in 64-bit precision.
struct GradCheckProblem {
  Model<double> model;
  TokenIds query;
  std::vector<TokenIds> candidates;
  std::vector<std::size_t> task_domains;

  static GradCheckProblem make(const ModelConfig& base, const RoutingStrategy& strategy,
                               std::uint64_t seed, const GradCheckOptions& opt) {
    ModelConfig c = base;
    c.precision = Precision::F64;
    c.vocab_size = std::max<std::size_t>(c.vocab_size, 16);
    GradCheckProblem p;
    p.model = Model<double>::initialize(c, seed, strategy);
    Rng rng(Rng::mix(seed, 77));
    p.model.backbone.for_each([&](Tensor<double>& t) { rng.fill_normal(t, opt.backbone_std); });
    for (auto& layer : p.model.backbone.layers) {
      for (auto* g : {&layer.ln1_gain, &layer.ln2_gain}) {
        for (auto& v : g->span()) v += opt.gain_offset;
      }
    }
    p.model.backbone.frozen = true;
    p.model.prefixes.for_each([&](Tensor<double>& t) { rng.fill_normal(t, opt.prefix_std); });
    rng.fill_normal(p.model.router.weights, opt.router_std);
    auto random_tokens = [&](std::size_t n) {
      TokenIds ids{2};
      while (ids.size() < n) ids.push_back(static_cast<std::int32_t>(3 + rng.index(c.vocab_size - 3)));
      return ids;
    };
    p.query = random_tokens(opt.query_len);
    for (std::size_t i = 0; i < opt.num_candidates; ++i) {
      p.candidates.push_back(random_tokens(opt.passage_len));
    }
    // Prior strategies get a random nonempty proper subset when possible.
    const std::size_t n = c.num_domains;
    for (std::size_t d = 0; d < n; ++d) {
      if (rng.uniform() < 0.5) p.task_domains.push_back(d);
    }
    if (p.task_domains.empty()) p.task_domains.push_back(rng.index(n));
    return p;
  }

  std::vector<Tensor<double>> passage_embeddings() const {
    std::vector<Tensor<double>> embs;
    for (const auto& t : candidates) embs.push_back(encode_passage(model, t).embedding);
    return embs;
  }

  /// `cached` may hold passage embeddings when only query-side parameters move.
  double loss(const std::vector<Tensor<double>>* cached = nullptr) const {
    auto q = encode_query(model, query, &task_domains);
    if (cached != nullptr) return info_nce_loss<double>(q.embedding, *cached, 0).loss;
    return info_nce_loss<double>(q.embedding, passage_embeddings(), 0).loss;
  }

  Gradients<double> analytic() const {
    const auto& m = model;
    Gradients<double> g = Gradients<double>::zeros(m.config);
    auto q = encode_query(m, query, &task_domains);
    std::vector<Encoding<double>> encs;
    std::vector<Tensor<double>> embs;
    for (const auto& t : candidates) {
      encs.push_back(encode_passage(m, t));
      embs.push_back(encs.back().embedding);
    }
    auto l = info_nce_loss<double>(q.embedding, embs, 0);
    encoder_backward(q.tape, l.grad_query, m, g);
    for (std::size_t j = 0; j < encs.size(); ++j) {
      encoder_backward(encs[j].tape, l.grad_candidates[j], m, g);
    }
    return g;
  }
};

/// Compares every P^g, P^d_i and W_r coordinate against central differences.
inline GradCheckResult run_grad_check(const ModelConfig& config, const RoutingStrategy& strategy,
                                      std::uint64_t seed, const GradCheckOptions& opt = {}) {
  GradCheckProblem problem = GradCheckProblem::make(config, strategy, seed, opt);
  Gradients<double> grads = problem.analytic();

  const std::vector<Tensor<double>> passages = problem.passage_embeddings();
  std::vector<std::pair<std::string, Tensor<double>*>> params;
  std::vector<Tensor<double>*> analytic;
  const auto& c = problem.model.config;
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    params.emplace_back("general.L" + std::to_string(l) + ".key", &problem.model.prefixes.general[l].key);
    params.emplace_back("general.L" + std::to_string(l) + ".value", &problem.model.prefixes.general[l].value);
    analytic.push_back(&grads.prefixes.general[l].key);
    analytic.push_back(&grads.prefixes.general[l].value);
  }
  for (std::size_t d = 0; d < c.num_domains; ++d) {
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      const std::string base = "domain" + std::to_string(d) + ".L" + std::to_string(l);
      params.emplace_back(base + ".key", &problem.model.prefixes.domains[d][l].key);
      params.emplace_back(base + ".value", &problem.model.prefixes.domains[d][l].value);
      analytic.push_back(&grads.prefixes.domains[d][l].key);
      analytic.push_back(&grads.prefixes.domains[d][l].value);
    }
  }
  params.emplace_back("router", &problem.model.router.weights);
  analytic.push_back(&grads.router);

  GradCheckResult result{strategy.name(), seed, 0.0, "", 0};
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<double>& target = *params[i].second;
    const Tensor<double> saved = target;
    const bool query_only = params[i].first.rfind("general.", 0) != 0;
    auto f = [&](const Tensor<double>& x) {
      target = x;
      return problem.loss(query_only ? &passages : nullptr);
    };
    const Tensor<double> numeric = central_difference_grad<double>(f, saved, opt.step);
    target = saved;
    for (std::size_t j = 0; j < numeric.size(); ++j) {
      const double err = relative_error((*analytic[i])[j], numeric[j], opt.floor);
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_tensor = params[i].first + "[" + std::to_string(j) + "]";
      }
    }
    result.coordinates += numeric.size();
  }
  return result;
}

}  // namespace ddr
