#pragma once

// Desk experiment pipeline: optional backbone warm-up, general-prefix
// training, then one domain-phase run per routing variant, each evaluated on
// the held-out queries. The CLI stages call the same functions.

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ddr/corpus.hpp"
#include "ddr/retrieval.hpp"
#include "ddr/training.hpp"

namespace ddr {

struct Variant {
  std::string name;
  RoutingStrategy strategy;
};

inline std::vector<Variant> ablation_variants(std::size_t top_k = 2) {
  return {{"DDR-prior", RoutingStrategy::prior()},
          {"DDR-topk", RoutingStrategy::top_k(top_k)},
          {"w/o routing", RoutingStrategy::uniform_prior()},
          {"w/o prior", RoutingStrategy::all_soft()}};
}

inline const std::string kGeneralBaseline = "general (phase 1)";

inline TrainPlan with_in_batch(TrainPlan p) {
  p.in_batch_negatives = true;
  return p;
}

/// Desk-scale defaults. TrainPlan::domain_defaults() keeps 7e-6, which barely
/// moves the domain prefixes at this scale.
struct ExperimentPlan {
  ModelConfig model = desk_profile();
  bool run_warmup = true;
  TrainPlan warmup = with_in_batch({TrainPhase::BackboneWarmup, 8, 32, 3e-3});
  TrainPlan general = with_in_batch({TrainPhase::General, 4, 32, 7e-3});
  TrainPlan domain = with_in_batch({TrainPhase::Domain, 20, 8, 3e-3});
  std::vector<Variant> variants = ablation_variants();
  std::size_t k = 10;
};

/// Tokenized views of a dataset shared by every stage.
struct PipelineData {
  const Dataset* dataset = nullptr;
  TrainingData general;
  TrainingData domain;
  std::vector<PassageRecordTokens> passages;
  std::vector<EvalQuery> test;

  PipelineData(const Dataset& ds, const Vocabulary& vocab, std::size_t max_len)
      : dataset(&ds),
        general(make_training_data(ds, ds.general_queries, vocab, max_len)),
        domain(make_training_data(ds, ds.train_queries, vocab, max_len)),
        passages(tokenize_passages(ds, vocab, max_len)),
        test(tokenize_queries(ds.test_queries, vocab, max_len)) {}
};

inline ModelConfig pipeline_config(const ExperimentPlan& plan, const Vocabulary& vocab) {
  ModelConfig c = plan.model;
  c.vocab_size = vocab.size();
  return c;
}

/// Warm-up when enabled; either way the backbone leaves frozen.
template <typename T>
TrainResult run_warmup_stage(Model<T>& model, const PipelineData& data, const ExperimentPlan& plan,
                             std::uint64_t seed) {
  if (!plan.run_warmup) {
    model.backbone.frozen = true;
    return {};
  }
  TrainPlan p = plan.warmup;
  p.seed = Rng::mix(seed, 11);
  return pretrain_backbone(model, data.general, p);
}

template <typename T>
TrainResult run_general_stage(Model<T>& model, const PipelineData& data, const ExperimentPlan& plan,
                              std::uint64_t seed) {
  TrainPlan p = plan.general;
  p.seed = Rng::mix(seed, 12);
  return train_general(model, data.general, p);
}

template <typename T>
TrainResult run_domain_stage(Model<T>& model, const PipelineData& data, const ExperimentPlan& plan,
                             const RoutingStrategy& strategy, std::uint64_t seed) {
  TrainPlan p = plan.domain;
  p.strategy = strategy;
  p.seed = Rng::mix(seed, 13);
  return train_domain(model, data.domain, data.dataset->domain_map, p);
}

struct VariantOutcome {
  std::string name;
  std::uint64_t seed = 0;
  EvalReport report;
  std::map<std::string, double> per_task;  // mean NDCG per task label
};

/// Mean of per-query NDCG grouped by task label.
inline std::map<std::string, double> per_task_mean(const EvalReport& report,
                                                   const std::vector<EvalQuery>& queries) {
  std::map<std::string, std::string> label;
  for (const auto& q : queries) label[q.id] = q.task_label;
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& [id, v] : report.per_query) {
    auto& a = acc[label[id]];
    a.first += v;
    a.second += 1;
  }
  std::map<std::string, double> out;
  for (const auto& [task, a] : acc) out[task] = a.first / static_cast<double>(a.second);
  return out;
}

/// Trains the shared phases once, then each variant from the same phase-1
/// state. The first outcome is the phase-1 general baseline.
template <typename T>
std::vector<VariantOutcome> run_experiment(const Dataset& ds, const Vocabulary& vocab,
                                           const ExperimentPlan& plan, std::uint64_t seed) {
  const ModelConfig cfg = pipeline_config(plan, vocab);
  const PipelineData data(ds, vocab, cfg.max_seq_len);
  Model<T> model = Model<T>::initialize(cfg, seed);
  run_warmup_stage(model, data, plan, seed);
  run_general_stage(model, data, plan, seed);
  const auto index = build_index(data.passages, model);

  std::vector<VariantOutcome> outcomes;
  {
    auto report = evaluate(model, index, data.test, ds.qrels, &ds.domain_map, {plan.k, true});
    outcomes.push_back({kGeneralBaseline, seed, report, per_task_mean(report, data.test)});
  }
  for (const auto& v : plan.variants) {
    Model<T> m = model;
    run_domain_stage(m, data, plan, v.strategy, seed);
    auto report = evaluate(m, index, data.test, ds.qrels, &ds.domain_map, {plan.k, false});
    outcomes.push_back({v.name, seed, report, per_task_mean(report, data.test)});
  }
  return outcomes;
}

/// Rows = variants in first-seen order, columns = tasks + mean, averaged over
/// seeds. Every variant must have been run on the same seed set.
struct AblationTable {
  std::vector<std::string> variants;
  std::vector<std::string> tasks;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::map<std::string, double>> cells;  // variant -> task -> value
  std::map<std::string, double> mean;                          // variant -> mean NDCG

  static AblationTable build(const std::vector<VariantOutcome>& outcomes) {
    AblationTable t;
    std::map<std::string, std::vector<std::uint64_t>> seeds_of;
    std::map<std::string, std::map<std::string, std::vector<double>>> task_values;
    std::map<std::string, std::vector<double>> mean_values;
    std::set<std::string> tasks;
    for (const auto& o : outcomes) {
      if (!seeds_of.count(o.name)) t.variants.push_back(o.name);
      seeds_of[o.name].push_back(o.seed);
      mean_values[o.name].push_back(o.report.mean);
      for (const auto& [task, v] : o.per_task) {
        tasks.insert(task);
        task_values[o.name][task].push_back(v);
      }
    }
    for (auto& [name, s] : seeds_of) std::sort(s.begin(), s.end());
    if (!t.variants.empty()) t.seeds = seeds_of[t.variants.front()];
    for (const auto& name : t.variants) {
      if (seeds_of[name] != t.seeds) {
        throw Error("ablation: variant '" + name + "' was not run on the same seeds as '" +
                    t.variants.front() + "'");
      }
    }
    t.tasks.assign(tasks.begin(), tasks.end());
    auto average = [](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    for (const auto& name : t.variants) {
      for (const auto& task : t.tasks) {
        const auto& v = task_values[name][task];
        if (v.size() != t.seeds.size()) {
          throw Error("ablation: task '" + task + "' missing for variant '" + name + "' on some seed");
        }
        t.cells[name][task] = average(v);
      }
      t.mean[name] = average(mean_values[name]);
    }
    return t;
  }

  std::string to_csv() const {
    std::string out = "variant";
    for (const auto& task : tasks) out += "," + task;
    out += ",mean\n";
    for (const auto& name : variants) {
      out += name;
      for (const auto& task : tasks) out += "," + format_fixed(cells.at(name).at(task));
      out += "," + format_fixed(mean.at(name)) + "\n";
    }
    return out;
  }
};

}  // namespace ddr
