// Acceptance harness: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>

#include "ddr/ddr.hpp"
#include "ddr/run_config.hpp"

using namespace ddr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ddr_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(DDR_CLI_PATH) + " " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// Default synthetic task with its vocabulary, shared by several criteria.
struct DeskData {
  Dataset ds = synthesize(SyntheticSpec{});
  Vocabulary vocab = build_vocab(dataset_texts(ds), 1);
};

const DeskData& desk_data() {
  static const DeskData d;
  return d;
}

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  const ModelConfig c = desk_profile();
  double worst = 0;
  std::string where;
  std::size_t checks = 0;
  for (const auto& s : {RoutingStrategy::soft(), RoutingStrategy::top_k(1), RoutingStrategy::top_k(2),
                        RoutingStrategy::prior()}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto r = run_grad_check(c, s, seed);
      if (r.coordinates == 0) return {false, "no coordinates checked for " + s.name()};
      ++checks;
      if (r.max_rel_error >= worst) {
        worst = r.max_rel_error;
        where = r.strategy + " seed " + std::to_string(seed) + " " + r.worst_tensor;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-4 && secs <= 60.0,
          std::to_string(checks) + " checks, max rel error " + fmt("%.2e", worst) + " at " + where + ", " +
              fmt("%.1f", secs) + " s"};
}

Outcome zero_prefix_equivalence() {
  ModelConfig c = desk_profile();
  c.vocab_size = 64;
  c.general_prefix_len = 0;
  c.domain_prefix_len = 0;
  Rng rng(2);
  std::size_t equal = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto m = Model<float>::initialize(c, 1000 + trial,
                                      trial % 2 ? RoutingStrategy::soft() : RoutingStrategy::top_k(2));
    rng.fill_normal(m.router.weights, 1.0);
    TokenIds t{kClsId};
    const std::size_t len = 1 + rng.index(c.max_seq_len - 1);
    for (std::size_t i = 0; i < len; ++i) t.push_back(static_cast<std::int32_t>(rng.index(c.vocab_size)));
    const auto plain = encode_plain(t, c, m.backbone).embedding;
    if (bit_equal(encode_passage(m, t).embedding, plain) && bit_equal(encode_query(m, t).embedding, plain)) {
      ++equal;
    }
  }
  return {equal == 100, std::to_string(equal) + "/100 inputs bit-identical"};
}

Outcome index_invariance() {
  const auto& d = desk_data();
  ModelConfig c = pipeline_config(ExperimentPlan{}, d.vocab);
  const PipelineData data(d.ds, d.vocab, c.max_seq_len);
  auto m = Model<float>::initialize(c, 3);
  Rng rng(33);
  m.prefixes.for_each([&](Tensor<float>& t) { rng.fill_normal(t, 0.5); });
  m.backbone.frozen = true;
  const auto before = build_index(data.passages, m).serialize();
  m.prefixes.for_each_domain([&](Tensor<float>& t) { rng.fill_normal(t, 2.0); });
  rng.fill_normal(m.router.weights, 2.0);
  m.router.strategy = RoutingStrategy::all_soft();
  const auto after = build_index(data.passages, m).serialize();
  return {before == after, std::to_string(data.passages.size()) + " passages, " +
                               std::to_string(before.size()) + " index bytes " +
                               (before == after ? "identical" : "differ")};
}

Outcome frozen_backbone() {
  const auto& d = desk_data();
  const ExperimentPlan plan;
  const ModelConfig c = pipeline_config(plan, d.vocab);
  const PipelineData data(d.ds, d.vocab, c.max_seq_len);
  auto m = Model<float>::initialize(c, 4);
  run_warmup_stage(m, data, plan, 4);
  const auto before = serialize_backbone(m.backbone);
  const auto prefixes = serialize_prefixes(m.prefixes);
  run_general_stage(m, data, plan, 4);
  run_domain_stage(m, data, plan, RoutingStrategy::prior(), 4);
  const auto after = serialize_backbone(m.backbone);
  const bool trained = serialize_prefixes(m.prefixes) != prefixes;
  return {before == after && trained, std::to_string(before.size()) + " backbone bytes " +
                                          (before == after ? "identical" : "differ") +
                                          (trained ? ", prefixes trained" : ", prefixes unchanged")};
}

Outcome parameter_budget() {
  const auto r = count_parameters(profile_model("paper-shape"));
  const double pct = 100.0 * r.trainable_fraction;
  bool ok = r.per_domain_prefix == 2359296 && r.reference_backbone == 110000000 && std::abs(pct - 2.14) <= 0.01;
  // The CLI report must agree.
  const auto dir = scratch("params");
  const int code = run_cli("param-report --profile paper-shape -o '" + (dir / "out").string() + "'", dir / "log");
  const auto csv = slurp(dir / "out" / "param_report.csv");
  const bool cli = code == 0 && csv.find("per_domain_prefix,2359296\n") != std::string::npos &&
                   csv.find("per_domain_percent,2.14%\n") != std::string::npos;
  return {ok && cli, "per-domain " + std::to_string(r.per_domain_prefix) + ", " + fmt("%.4f", pct) + "% of " +
                         std::to_string(r.reference_backbone) + (cli ? ", CLI agrees" : ", CLI disagrees")};
}

double oracle_dcg(const std::vector<std::string>& order, const std::map<std::string, int>& judged,
                  std::size_t k) {
  double s = 0;
  for (std::size_t r = 0; r < std::min(k, order.size()); ++r) {
    const int g = judged.count(order[r]) ? judged.at(order[r]) : 0;
    s += (std::pow(2.0, g) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
  }
  return s;
}

Outcome ndcg_oracle() {
  Rng rng(6);
  double worst = 0;
  std::size_t rankings = 0;
  bool nullopt_ok = true;
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.index(5);
    const bool graded = trial % 2;
    std::map<std::string, int> judged;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) {
      ids.push_back("d" + std::to_string(i));
      judged[ids.back()] = static_cast<int>(rng.index(graded ? 4 : 2));
    }
    for (std::size_t k : {std::size_t{1}, std::size_t{3}, std::size_t{5}, std::size_t{10}}) {
      std::sort(ids.begin(), ids.end());
      double ideal = 0;
      do ideal = std::max(ideal, oracle_dcg(ids, judged, k));
      while (std::next_permutation(ids.begin(), ids.end()));
      std::sort(ids.begin(), ids.end());
      do {
        RankedList ranked{"q", {}};
        for (const auto& id : ids) ranked.entries.push_back({id, 0.0});
        const auto got = ndcg_at_k(ranked, judged, k);
        ++rankings;
        if (ideal == 0.0) {
          // Queries with no relevant passage are excluded, not scored.
          const bool any = std::any_of(judged.begin(), judged.end(), [](auto& p) { return p.second > 0; });
          if (got.has_value() || any) nullopt_ok = false;
        } else if (!got) {
          nullopt_ok = false;
        } else {
          worst = std::max(worst, std::abs(*got - oracle_dcg(ids, judged, k) / ideal));
        }
      } while (std::next_permutation(ids.begin(), ids.end()));
    }
  }
  return {worst <= 1e-12 && nullopt_ok,
          std::to_string(rankings) + " rankings, max |diff| " + fmt("%.1e", worst)};
}

Outcome search_oracle() {
  Rng rng(7);
  const std::size_t n = 500, dim = 8;
  // Small integer entries make scores exact and ties common.
  EmbeddingIndex<double> index(dim);
  std::vector<std::vector<double>> embs;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<double> e({dim});
    for (auto& v : e.span()) v = static_cast<double>(static_cast<int>(rng.index(5)) - 2);
    embs.emplace_back(e.span().begin(), e.span().end());
    index.add("p" + std::to_string(rng.index(1000000)) + "_" + std::to_string(i), std::move(e));
  }
  std::size_t mismatches = 0, ties = 0;
  for (int q = 0; q < 200; ++q) {
    Tensor<double> query({dim});
    for (auto& v : query.span()) v = static_cast<double>(static_cast<int>(rng.index(5)) - 2);
    std::vector<std::pair<long double, std::string>> all;
    for (std::size_t i = 0; i < n; ++i) {
      long double s = 0;
      for (std::size_t j = 0; j < dim; ++j) s += static_cast<long double>(query[j]) * embs[i][j];
      all.emplace_back(s, index.id(i));
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (std::size_t r = 1; r < n; ++r) ties += all[r].first == all[r - 1].first;
    const std::size_t k = q % 2 ? 10 : n;
    const auto got = search(index, query, k, "q");
    if (got.entries.size() != k) {
      ++mismatches;
      continue;
    }
    for (std::size_t r = 0; r < k; ++r) {
      if (got.entries[r].passage_id != all[r].second || got.entries[r].score != static_cast<double>(all[r].first)) {
        ++mismatches;
        break;
      }
    }
  }
  return {mismatches == 0, "200 queries x 500 passages, " + std::to_string(ties) + " tied neighbours, " +
                               std::to_string(mismatches) + " mismatching queries"};
}

Outcome desk_learning() {
  const auto t0 = Clock::now();
  const auto& d = desk_data();
  std::vector<VariantOutcome> all;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    auto o = run_experiment<float>(d.ds, d.vocab, ExperimentPlan{}, seed);
    all.insert(all.end(), o.begin(), o.end());
  }
  const auto t = AblationTable::build(all);
  const double prior = t.mean.at("DDR-prior"), general = t.mean.at(kGeneralBaseline);
  const double uniform = t.mean.at("w/o routing"), soft = t.mean.at("w/o prior");
  const double secs = seconds_since(t0);
  const bool ok = prior > general && prior >= uniform && prior >= soft && secs <= 600.0;
  return {ok, "DDR-prior " + fmt("%.4f", prior) + ", general " + fmt("%.4f", general) + ", w/o routing " +
                  fmt("%.4f", uniform) + ", w/o prior " + fmt("%.4f", soft) + ", DDR-topk " +
                  fmt("%.4f", t.mean.at("DDR-topk")) + ", " + fmt("%.0f", secs) + " s"};
}

Outcome routing_invariants() {
  Rng rng(9);
  std::size_t failures = 0;
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.index(8), d = 1 + rng.index(32);
    Tensor<double> x({d}), w({n, d});
    rng.fill_normal(x, 2.0);
    rng.fill_normal(w, 2.0);
    const auto beta = route_distribution<double>(x.span(), w);
    double total = 0;
    for (double b : beta.span()) total += b;
    worst = std::max(worst, std::abs(total - 1.0));
    auto support = [](const Selection<double>& s) {
      std::set<std::size_t> out;
      for (std::size_t i = 0; i < s.weights.size(); ++i)
        if (s.weights[i] != 0.0) out.insert(i);
      return out;
    };
    for (std::size_t k = 1; k <= n; ++k) {
      if (support(select_active(beta, RoutingStrategy::top_k(k))).size() != std::min(k, n)) ++failures;
    }
    std::vector<std::size_t> mapped(n);
    for (std::size_t i = 0; i < n; ++i) mapped[i] = i;
    rng.shuffle(mapped);
    mapped.resize(1 + rng.index(n));
    std::sort(mapped.begin(), mapped.end());
    const auto sel = support(select_active(beta, RoutingStrategy::prior(), &mapped));
    if (sel != std::set<std::size_t>(mapped.begin(), mapped.end())) ++failures;
  }
  return {failures == 0 && worst <= 1e-9,
          "1000 instances, max |sum - 1| " + fmt("%.1e", worst) + ", " + std::to_string(failures) + " support violations"};
}

Outcome determinism() {
  const auto root = scratch("determinism");
  const std::vector<std::string> stages{"gen-data",     "build-vocab", "pretrain-backbone", "train-general",
                                        "train-domain", "index",       "eval"};
  for (const char* run : {"a", "b"}) {
    for (const auto& s : stages) {
      const int code = run_cli(s + " -o '" + (root / run).string() + "'", root / (std::string(run) + ".log"));
      if (code != 0) return {false, std::string("run ") + run + " failed at " + s + ": " + slurp(root / (std::string(run) + ".log"))};
    }
  }
  std::size_t files = 0;
  std::vector<std::string> differ;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), root / "a");
    ++files;
    if (slurp(e.path()) != slurp(root / "b" / rel)) differ.push_back(rel.string());
  }
  for (const char* required : {"checkpoints/backbone.ckpt", "checkpoints/general.ckpt", "checkpoints/domain.ckpt",
                               "index.bin", "run.tsv", "report.csv"}) {
    if (!fs::exists(root / "a" / required)) differ.push_back(std::string(required) + " (missing)");
  }
  std::string detail = std::to_string(files) + " files compared";
  for (const auto& f : differ) detail += ", differs: " + f;
  return {differ.empty(), detail};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient fidelity", gradient_fidelity},
      {"zero-prefix equivalence", zero_prefix_equivalence},
      {"passage-index invariance", index_invariance},
      {"frozen-backbone invariance", frozen_backbone},
      {"parameter budget", parameter_budget},
      {"NDCG oracle", ndcg_oracle},
      {"exact-search oracle", search_oracle},
      {"desk-scale learning", desk_learning},
      {"routing invariants", routing_invariants},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << i + 1 << " " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed ? 1 : 0;
}
