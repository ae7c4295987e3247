#pragma once

// Declarative run configuration for the command-line tool: one JSON object
// with optional sections. Unknown keys and wrong types are errors.

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddr/config.hpp"
#include "ddr/corpus.hpp"
#include "ddr/experiment.hpp"
#include "ddr/routing.hpp"

namespace ddr {

class ConfigError : public Error {
 public:
  using Error::Error;
};

struct RunConfig {
  std::string profile = "desk";
  std::uint64_t seed = 1;
  std::string output_dir = "runs/desk";
  std::string data_dir;  // empty: <output_dir>/data
  std::size_t min_count = 1;
  SyntheticSpec synthetic;
  ExperimentPlan plan;
  RoutingStrategy strategy = RoutingStrategy::prior();
  std::size_t ablate_top_k = 2;
  std::vector<std::uint64_t> ablate_seeds{1, 2, 3, 4};
};

namespace detail {

using nlohmann::json;

class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
  }
  Section(const Section&) = delete;
  Section& operator=(const Section&) = delete;

  /// Rejects keys that were never read.
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [key, value] : j_.items()) {
      if (!read_.count(key)) throw ConfigError("config: unknown key '" + path(key) + "'");
    }
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  Section section(const std::string& key) {
    read_.insert(key);
    return Section(j_.at(key), path(key));
  }

  void get(const std::string& key, std::size_t& out) {
    if (!mark(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_unsigned()) throw type_error(key, "a non-negative integer");
    out = v.get<std::size_t>();
  }
  void get(const std::string& key, double& out) {
    if (!mark(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number()) throw type_error(key, "a number");
    out = v.get<double>();
  }
  void get(const std::string& key, bool& out) {
    if (!mark(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_boolean()) throw type_error(key, "a boolean");
    out = v.get<bool>();
  }
  void get(const std::string& key, std::string& out) {
    if (!mark(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_string()) throw type_error(key, "a string");
    out = v.get<std::string>();
  }
  void get(const std::string& key, std::vector<std::uint64_t>& out) {
    if (!mark(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_array()) throw type_error(key, "an array of non-negative integers");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_number_unsigned()) throw type_error(key, "an array of non-negative integers");
      out.push_back(e.get<std::uint64_t>());
    }
  }

  template <typename Parse, typename Out>
  void get_parsed(const std::string& key, Out& out, Parse&& parse) {
    std::string s;
    if (!has(key)) {
      mark(key);
      return;
    }
    get(key, s);
    try {
      out = parse(s);
    } catch (const Error& e) {
      throw ConfigError("config: '" + path(key) + "': " + e.what());
    }
  }

 private:
  bool mark(const std::string& key) {
    read_.insert(key);
    return j_.contains(key);
  }
  std::string path(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }
  ConfigError type_error(const std::string& key, const char* expected) const {
    return ConfigError("config: '" + path(key) + "' must be " + expected);
  }

  const json& j_;
  std::string name_;
  std::set<std::string> read_;
};

inline void read_plan(Section& s, TrainPlan& p) {
  s.get("epochs", p.epochs);
  s.get("batch_size", p.batch_size);
  s.get("learning_rate", p.learning_rate);
  s.get("num_negatives", p.num_negatives);
  s.get("in_batch_negatives", p.in_batch_negatives);
  if (p.phase == TrainPhase::Domain) s.get("joint_general", p.joint_general);
}

inline nlohmann::json plan_json(const TrainPlan& p) {
  nlohmann::json j{{"epochs", p.epochs},
                   {"batch_size", p.batch_size},
                   {"learning_rate", p.learning_rate},
                   {"num_negatives", p.num_negatives},
                   {"in_batch_negatives", p.in_batch_negatives}};
  if (p.phase == TrainPhase::Domain) j["joint_general"] = p.joint_general;
  return j;
}

}  // namespace detail

inline ModelConfig profile_model(const std::string& profile) {
  if (profile == "desk") return desk_profile();
  if (profile == "paper-shape") return paper_shape_profile();
  throw ConfigError("config: unknown profile '" + profile + "' (expected desk or paper-shape)");
}

/// Applies "section.key=value" overrides; the value is parsed as JSON and
/// falls back to a plain string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override '" + assignment + "' has an empty key segment");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    if (!node->contains(part)) (*node)[part] = nlohmann::json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw ConfigError("override '" + assignment + "': '" + part + "' is not a section");
    start = dot + 1;
  }
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig rc;
  detail::Section top(j, "");
  top.get("profile", rc.profile);
  rc.plan.model = profile_model(rc.profile);
  top.get("seed", rc.seed);
  top.get("output_dir", rc.output_dir);
  if (top.has("model")) {
    auto m = top.section("model");
    auto& c = rc.plan.model;
    m.get("num_layers", c.num_layers);
    m.get("num_heads", c.num_heads);
    m.get("model_dim", c.model_dim);
    m.get("head_dim", c.head_dim);
    m.get("ffn_dim", c.ffn_dim);
    m.get("vocab_size", c.vocab_size);
    m.get("max_seq_len", c.max_seq_len);
    m.get("general_prefix_len", c.general_prefix_len);
    m.get("domain_prefix_len", c.domain_prefix_len);
    m.get("num_domains", c.num_domains);
    m.get("init_std", c.init_std);
    m.get("reference_backbone_params", c.reference_backbone_params);
    m.get_parsed("pooling", c.pooling, parse_pooling);
    m.get_parsed("precision", c.precision, parse_precision);
    m.get_parsed("query_prefix_mode", c.query_prefix_mode, parse_query_prefix_mode);
  }
  if (top.has("data")) {
    auto d = top.section("data");
    d.get("dir", rc.data_dir);
    d.get("min_count", rc.min_count);
    if (d.has("synthetic")) {
      auto s = d.section("synthetic");
      auto& sp = rc.synthetic;
      s.get("num_domains", sp.num_domains);
      s.get("signature_size", sp.signature_size);
      s.get("overlap_ratio", sp.overlap_ratio);
      s.get("passages_per_domain", sp.passages_per_domain);
      s.get("train_queries_per_domain", sp.train_queries_per_domain);
      s.get("test_queries_per_domain", sp.test_queries_per_domain);
      s.get("multi_domain_fraction", sp.multi_domain_fraction);
      s.get("key_words", sp.key_words);
      s.get("exclusive_words", sp.exclusive_words);
      s.get("passage_fillers", sp.passage_fillers);
      s.get("query_fillers", sp.query_fillers);
      s.get("filler_vocab", sp.filler_vocab);
      s.get("general_queries_per_passage", sp.general_queries_per_passage);
      s.get("general_query_words", sp.general_query_words);
      s.get("general_key_words", sp.general_key_words);
      s.get("family_negatives", sp.family_negatives);
      s.get("topic_pool", sp.topic_pool);
      s.get("topic_words", sp.topic_words);
      s.get("general_topic_prob", sp.general_topic_prob);
      s.get("seed", sp.seed);
    }
  }
  if (top.has("warmup")) {
    auto w = top.section("warmup");
    w.get("enabled", rc.plan.run_warmup);
    detail::read_plan(w, rc.plan.warmup);
  }
  if (top.has("general")) {
    auto g = top.section("general");
    detail::read_plan(g, rc.plan.general);
  }
  if (top.has("domain")) {
    auto d = top.section("domain");
    detail::read_plan(d, rc.plan.domain);
  }
  if (top.has("routing")) {
    auto r = top.section("routing");
    r.get_parsed("strategy", rc.strategy, RoutingStrategy::parse);
    r.get("renormalize", rc.strategy.renormalize);
    r.get("ablate_top_k", rc.ablate_top_k);
  }
  if (top.has("eval")) top.section("eval").get("k", rc.plan.k);
  if (top.has("ablate")) top.section("ablate").get("seeds", rc.ablate_seeds);

  rc.plan.variants = ablation_variants(rc.ablate_top_k);
  // Validation beyond types.
  try {
    rc.plan.model.validate();
    rc.plan.warmup.validate();
    rc.plan.general.validate();
    rc.plan.domain.validate();
    rc.strategy.validate(rc.plan.model.num_domains);
    RoutingStrategy::top_k(rc.ablate_top_k).validate(rc.plan.model.num_domains);
    rc.synthetic.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (rc.plan.k < 1) throw ConfigError("config: 'eval.k' must be >= 1");
  if (rc.ablate_seeds.empty()) throw ConfigError("config: 'ablate.seeds' must not be empty");
  if (std::set<std::uint64_t>(rc.ablate_seeds.begin(), rc.ablate_seeds.end()).size() !=
      rc.ablate_seeds.size()) {
    throw ConfigError("config: 'ablate.seeds' contains duplicates");
  }
  if (rc.output_dir.empty()) throw ConfigError("config: 'output_dir' must not be empty");
  return rc;
}

/// Fully resolved configuration, every key explicit. Parsing it back yields
/// the same RunConfig.
inline nlohmann::json to_json(const RunConfig& rc) {
  const auto& c = rc.plan.model;
  nlohmann::json j;
  j["profile"] = rc.profile;
  j["seed"] = rc.seed;
  j["output_dir"] = rc.output_dir;
  j["model"] = {{"num_layers", c.num_layers},
                {"num_heads", c.num_heads},
                {"model_dim", c.model_dim},
                {"head_dim", c.head_dim},
                {"ffn_dim", c.ffn_dim},
                {"vocab_size", c.vocab_size},
                {"max_seq_len", c.max_seq_len},
                {"general_prefix_len", c.general_prefix_len},
                {"domain_prefix_len", c.domain_prefix_len},
                {"num_domains", c.num_domains},
                {"init_std", c.init_std},
                {"reference_backbone_params", c.reference_backbone_params},
                {"pooling", to_string(c.pooling)},
                {"precision", to_string(c.precision)},
                {"query_prefix_mode", to_string(c.query_prefix_mode)}};
  j["data"] = {{"dir", rc.data_dir}, {"min_count", rc.min_count}, {"synthetic", to_json(rc.synthetic)}};
  j["warmup"] = detail::plan_json(rc.plan.warmup);
  j["warmup"]["enabled"] = rc.plan.run_warmup;
  j["general"] = detail::plan_json(rc.plan.general);
  j["domain"] = detail::plan_json(rc.plan.domain);
  RoutingStrategy base = rc.strategy;
  j["routing"] = {{"strategy", base.name()},
                  {"renormalize", base.renormalize},
                  {"ablate_top_k", rc.ablate_top_k}};
  j["eval"] = {{"k", rc.plan.k}};
  j["ablate"] = {{"seeds", rc.ablate_seeds}};
  return j;
}

}  // namespace ddr
