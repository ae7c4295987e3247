// ddr: command-line driver for the staged pipeline.
//
//   ddr <subcommand> [--config run.json] [--set section.key=value]... [-o dir]
//
// Exit status: 0 ok, 1 invalid configuration or arguments, 2 stage failure,
// 3 gradient check over tolerance.

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ddr/ddr.hpp"
#include "ddr/run_config.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitStage = 2;
constexpr int kExitGradCheck = 3;
constexpr double kGradTolerance = 1e-4;

class StageFailure : public ddr::Error {
 public:
  using Error::Error;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw StageFailure("cannot open '" + p.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw StageFailure("cannot write '" + p.string() + "'");
  out << text;
  if (!out) throw StageFailure("write failed for '" + p.string() + "'");
}

void require(const fs::path& p, const std::string& hint) {
  if (!fs::exists(p)) throw StageFailure("missing " + p.string() + "; " + hint);
}

/// Holds <output_dir>/.lock for the lifetime of the process.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      throw StageFailure("output directory is in use (" + path_.string() +
                         " exists; remove it if no other ddr process is running)");
    }
    ::close(fd);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
};

struct Workspace {
  ddr::RunConfig rc;
  json resolved;
  fs::path out;

  fs::path data_dir() const { return rc.data_dir.empty() ? out / "data" : fs::path(rc.data_dir); }
  fs::path vocab() const { return out / "vocab.txt"; }
  fs::path checkpoint(const std::string& name) const { return out / "checkpoints" / (name + ".ckpt"); }
  fs::path index() const { return out / "index.bin"; }
  fs::path stage_manifest(const std::string& stage) const { return out / "stages" / (stage + ".json"); }

  std::string relative(const fs::path& p) const {
    const auto r = p.lexically_normal().lexically_relative(out.lexically_normal());
    if (r.empty() || *r.begin() == "..") return p.string();
    return r.generic_string();
  }
};

/// Inputs, outputs and seed of one stage; written to stages/<name>.json.
/// No timestamps, so reruns produce the same bytes.
struct StageRecord {
  std::string stage;
  json inputs = json::object();
  json outputs = json::object();
  json extra = json::object();

  void input(const Workspace& ws, const fs::path& p) { inputs[ws.relative(p)] = ddr::file_checksum(p.string()); }
  void output(const Workspace& ws, const fs::path& p) { outputs[ws.relative(p)] = ddr::file_checksum(p.string()); }

  void write(const Workspace& ws) const {
    json config = ws.resolved;
    config.erase("output_dir");
    json m{{"stage", stage}, {"seed", ws.rc.seed}, {"config", config},
           {"config_checksum", checksum(config.dump())}, {"inputs", inputs}, {"outputs", outputs}};
    for (const auto& [k, v] : extra.items()) m[k] = v;
    write_text(ws.stage_manifest(stage), m.dump(2) + "\n");
  }

  static std::string checksum(const std::string& s) {
    return ddr::hex64(ddr::fnv1a64(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  }
};

ddr::Dataset load_data(const Workspace& ws, StageRecord& rec, bool require_labels) {
  const auto dir = ws.data_dir();
  require(dir / "passages.jsonl", "run gen-data first or set data.dir");
  const auto paths = ddr::DatasetPaths::in_directory(dir.string());
  ddr::Dataset ds = ddr::load_dataset(paths, require_labels);
  for (const auto& p : {paths.passages, paths.train_queries, paths.test_queries, paths.general_queries,
                        paths.qrels, paths.domain_map, paths.negatives}) {
    if (fs::exists(p)) rec.input(ws, p);
  }
  const auto n = ws.rc.plan.model.num_domains;
  if (ds.domain_map.num_domains() != n) {
    throw ddr::ConfigError("model.num_domains is " + std::to_string(n) + " but the dataset has " +
                           std::to_string(ds.domain_map.num_domains()) + " domains");
  }
  return ds;
}

ddr::Vocabulary load_vocab(const Workspace& ws, StageRecord& rec) {
  require(ws.vocab(), "run build-vocab first");
  rec.input(ws, ws.vocab());
  return ddr::Vocabulary::parse(read_text(ws.vocab()));
}

template <typename T>
ddr::Model<T> load_model(const Workspace& ws, StageRecord& rec, const std::string& name,
                         const std::string& hint, const ddr::ModelConfig& expected) {
  const auto p = ws.checkpoint(name);
  require(p, hint);
  rec.input(ws, p);
  auto m = ddr::load_checkpoint<T>(p.string());
  if (!(m.config == expected)) {
    throw StageFailure("checkpoint " + p.string() +
                       " does not match the configured model; rerun the earlier stages");
  }
  return m;
}

void write_loss(const Workspace& ws, StageRecord& rec, const std::string& phase,
                const ddr::TrainResult& r) {
  std::string csv = "step,epoch,mean_loss\n";
  for (const auto& pt : r.curve) {
    csv += std::to_string(pt.step) + "," + std::to_string(pt.epoch) + "," +
           ddr::format_fixed(pt.mean_loss, 8) + "\n";
  }
  const auto p = ws.out / ("loss_" + phase + ".csv");
  write_text(p, csv);
  rec.output(ws, p);
}

template <typename T>
void save_model(const Workspace& ws, StageRecord& rec, const std::string& name, const ddr::Model<T>& m) {
  const auto p = ws.checkpoint(name);
  fs::create_directories(p.parent_path());
  ddr::save_checkpoint(p.string(), m);
  rec.output(ws, p);
}

void reject_paper_shape(const Workspace& ws, const std::string& stage) {
  if (ws.rc.profile == "paper-shape") {
    throw ddr::ConfigError("the paper-shape profile is for param-report only; '" + stage +
                           "' needs the desk profile");
  }
}

// ---- stages ---------------------------------------------------------------

int gen_data(const Workspace& ws) {
  StageRecord rec{"gen-data"};
  const auto dir = ws.data_dir();
  if (fs::exists(dir / "passages.jsonl") && !fs::exists(dir / "manifest.json")) {
    throw StageFailure(dir.string() + " holds a dataset that was not generated; refusing to overwrite");
  }
  const json manifest = ddr::generate_synthetic(ws.rc.synthetic, dir.string());
  for (const auto& [file, sum] : manifest["checksums"].items()) rec.outputs[ws.relative(dir / file)] = sum;
  rec.output(ws, dir / "manifest.json");
  rec.extra["bag_of_words_recall_at_10"] = manifest["bag_of_words_recall_at_10"];
  rec.write(ws);
  std::cout << "wrote synthetic dataset to " << dir.string() << " (bag-of-words recall@10 "
            << ddr::format_fixed(manifest["bag_of_words_recall_at_10"].get<double>(), 4) << ")\n";
  return 0;
}

int build_vocab(const Workspace& ws) {
  StageRecord rec{"build-vocab"};
  const auto ds = load_data(ws, rec, false);
  const auto vocab = ddr::build_vocab(ddr::dataset_texts(ds), ws.rc.min_count);
  write_text(ws.vocab(), vocab.serialize());
  rec.output(ws, ws.vocab());
  rec.extra["vocab_size"] = vocab.size();
  rec.write(ws);
  std::cout << "vocabulary: " << vocab.size() << " tokens\n";
  return 0;
}

template <typename T>
int pretrain_backbone(const Workspace& ws) {
  reject_paper_shape(ws, "pretrain-backbone");
  StageRecord rec{"pretrain-backbone"};
  const auto ds = load_data(ws, rec, false);
  const auto vocab = load_vocab(ws, rec);
  const auto cfg = ddr::pipeline_config(ws.rc.plan, vocab);
  const ddr::PipelineData data(ds, vocab, cfg.max_seq_len);
  auto model = ddr::Model<T>::initialize(cfg, ws.rc.seed);
  const auto r = ddr::run_warmup_stage(model, data, ws.rc.plan, ws.rc.seed);
  save_model(ws, rec, "backbone", model);
  write_loss(ws, rec, "warmup", r);
  rec.extra["warmup"] = ws.rc.plan.run_warmup;
  rec.write(ws);
  if (!r.epoch_mean_loss.empty()) {
    std::cout << "warm-up final epoch loss " << ddr::format_fixed(r.epoch_mean_loss.back(), 6) << "\n";
  } else {
    std::cout << "warm-up disabled; saved the frozen initial backbone\n";
  }
  return 0;
}

template <typename T>
int train_general(const Workspace& ws) {
  reject_paper_shape(ws, "train-general");
  StageRecord rec{"train-general"};
  const auto ds = load_data(ws, rec, false);
  const auto vocab = load_vocab(ws, rec);
  const auto cfg = ddr::pipeline_config(ws.rc.plan, vocab);
  const ddr::PipelineData data(ds, vocab, cfg.max_seq_len);
  auto model = load_model<T>(ws, rec, "backbone", "run pretrain-backbone first", cfg);
  const auto r = ddr::run_general_stage(model, data, ws.rc.plan, ws.rc.seed);
  save_model(ws, rec, "general", model);
  write_loss(ws, rec, "general", r);
  rec.write(ws);
  std::cout << "general phase final epoch loss " << ddr::format_fixed(r.epoch_mean_loss.back(), 6) << "\n";
  return 0;
}

template <typename T>
int train_domain(const Workspace& ws) {
  reject_paper_shape(ws, "train-domain");
  StageRecord rec{"train-domain"};
  const auto ds = load_data(ws, rec, ws.rc.strategy.needs_task_domains());
  const auto vocab = load_vocab(ws, rec);
  const auto cfg = ddr::pipeline_config(ws.rc.plan, vocab);
  const ddr::PipelineData data(ds, vocab, cfg.max_seq_len);
  auto model = load_model<T>(ws, rec, "general", "run train-general first", cfg);
  const auto r = ddr::run_domain_stage(model, data, ws.rc.plan, ws.rc.strategy, ws.rc.seed);
  save_model(ws, rec, "domain", model);
  write_loss(ws, rec, "domain", r);
  rec.extra["strategy"] = ws.rc.strategy.name();
  rec.write(ws);
  std::cout << "domain phase (" << ws.rc.strategy.name() << ") final epoch loss "
            << ddr::format_fixed(r.epoch_mean_loss.back(), 6) << "\n";
  return 0;
}

template <typename T>
int build_index(const Workspace& ws, std::string source) {
  reject_paper_shape(ws, "index");
  StageRecord rec{"index"};
  const auto ds = load_data(ws, rec, false);
  const auto vocab = load_vocab(ws, rec);
  const auto cfg = ddr::pipeline_config(ws.rc.plan, vocab);
  if (source.empty()) source = fs::exists(ws.checkpoint("domain")) ? "domain" : "general";
  auto model = load_model<T>(ws, rec, source, "run train-" + source + " first", cfg);
  const auto passages = ddr::tokenize_passages(ds, vocab, cfg.max_seq_len);
  const auto index = ddr::build_index(passages, model);
  ddr::write_file(ws.index().string(), index.serialize());
  rec.output(ws, ws.index());
  rec.extra["checkpoint"] = source;
  rec.extra["passage_encoder"] = ddr::passage_encoder_fingerprint(model);
  rec.write(ws);
  std::cout << "indexed " << index.size() << " passages from the " << source << " checkpoint\n";
  return 0;
}

template <typename T>
ddr::EmbeddingIndex<T> load_index(const Workspace& ws, StageRecord& rec, const ddr::Model<T>& model) {
  rec.input(ws, ws.index());
  auto index = ddr::EmbeddingIndex<T>::deserialize(ddr::read_file(ws.index().string()));
  const auto manifest = ws.stage_manifest("index");
  if (fs::exists(manifest)) {
    const json m = json::parse(read_text(manifest));
    if (m.value("passage_encoder", "") != ddr::passage_encoder_fingerprint(model)) {
      throw StageFailure("index was built with a different passage encoder; run index again");
    }
  }
  return index;
}

template <typename T>
int evaluate(const Workspace& ws, bool general_only) {
  reject_paper_shape(ws, "eval");
  if (!fs::exists(ws.index())) throw StageFailure("run index first");
  StageRecord rec{general_only ? "eval-general" : "eval"};
  const bool labels = !general_only && ws.rc.strategy.needs_task_domains();
  const auto ds = load_data(ws, rec, labels);
  const auto vocab = load_vocab(ws, rec);
  const auto cfg = ddr::pipeline_config(ws.rc.plan, vocab);
  const std::string source = general_only ? "general" : "domain";
  const auto model = load_model<T>(ws, rec, source, "run train-" + source + " first", cfg);
  const auto index = load_index(ws, rec, model);
  const auto queries = ddr::tokenize_queries(ds.test_queries, vocab, cfg.max_seq_len);
  const auto report =
      ddr::evaluate(model, index, queries, ds.qrels, &ds.domain_map, {ws.rc.plan.k, general_only});

  const std::string suffix = general_only ? "_general" : "";
  const auto run_path = ws.out / ("run" + suffix + ".tsv");
  const auto report_path = ws.out / ("report" + suffix + ".csv");
  const auto tasks_path = ws.out / ("report_tasks" + suffix + ".csv");
  write_text(run_path, ddr::format_run_file(report.runs));
  write_text(report_path, ddr::format_report_csv(report, ws.rc.plan.k));
  std::string tasks = "task,ndcg@" + std::to_string(ws.rc.plan.k) + "\n";
  for (const auto& [task, v] : ddr::per_task_mean(report, queries)) {
    tasks += (task.empty() ? "(none)" : task) + "," + ddr::format_fixed(v) + "\n";
  }
  write_text(tasks_path, tasks);
  for (const auto& p : {run_path, report_path, tasks_path}) rec.output(ws, p);
  rec.extra["mean_ndcg"] = ddr::format_fixed(report.mean);
  rec.write(ws);
  std::cout << tasks << "mean ndcg@" << ws.rc.plan.k << " " << ddr::format_fixed(report.mean, 4)
            << " over " << report.per_query.size() << " queries\n";
  return 0;
}

struct SearchArgs {
  std::string query;
  std::string task;
  std::size_t top_k = 0;
  bool general_only = false;
};

template <typename T>
int search(const Workspace& ws, const SearchArgs& args) {
  reject_paper_shape(ws, "search");
  if (!fs::exists(ws.index())) throw StageFailure("run index first");
  StageRecord rec{"search"};
  const auto ds = load_data(ws, rec, false);
  const auto vocab = load_vocab(ws, rec);
  const auto cfg = ddr::pipeline_config(ws.rc.plan, vocab);
  const std::string source = args.general_only ? "general" : "domain";
  const auto model = load_model<T>(ws, rec, source, "run train-" + source + " first", cfg);
  const auto index = load_index(ws, rec, model);
  const auto tokens = ddr::tokenize(args.query, vocab, cfg.max_seq_len);

  const std::vector<std::size_t>* domains = nullptr;
  if (!args.task.empty()) {
    if (!ds.domain_map.has_task(args.task)) throw ddr::ConfigError("unknown task label '" + args.task + "'");
    domains = &ds.domain_map.lookup(args.task);
  } else if (!args.general_only && model.router.strategy.needs_task_domains()) {
    throw ddr::ConfigError("strategy '" + model.router.strategy.name() + "' needs --task");
  }
  const auto emb = args.general_only
                       ? ddr::encode_passage(tokens, model.config, model.backbone, model.prefixes).embedding
                       : ddr::encode_query(tokens, model.config, model.backbone, model.prefixes,
                                           model.router, domains)
                             .embedding;
  const auto ranked = ddr::search(index, emb, args.top_k ? args.top_k : ws.rc.plan.k, "query");
  const std::string run = ddr::format_run_file({ranked});
  const auto path = ws.out / "search.tsv";
  write_text(path, run);
  rec.output(ws, path);
  rec.extra["query"] = args.query;
  rec.extra["task"] = args.task;
  rec.write(ws);
  std::cout << run;
  return 0;
}

template <typename T>
int ablate(const Workspace& ws) {
  reject_paper_shape(ws, "ablate");
  StageRecord rec{"ablate"};
  const auto ds = load_data(ws, rec, true);
  const auto vocab = load_vocab(ws, rec);
  std::vector<ddr::VariantOutcome> outcomes;
  for (const auto seed : ws.rc.ablate_seeds) {
    auto o = ddr::run_experiment<T>(ds, vocab, ws.rc.plan, seed);
    std::cout << "seed " << seed << ":";
    for (const auto& v : o) std::cout << " [" << v.name << "] " << ddr::format_fixed(v.report.mean, 4);
    std::cout << "\n";
    outcomes.insert(outcomes.end(), o.begin(), o.end());
  }
  const auto table = ddr::AblationTable::build(outcomes);

  std::string runs = "variant,seed";
  for (const auto& t : table.tasks) runs += "," + t;
  runs += ",mean\n";
  for (const auto& o : outcomes) {
    runs += o.name + "," + std::to_string(o.seed);
    for (const auto& t : table.tasks) runs += "," + ddr::format_fixed(o.per_task.at(t));
    runs += "," + ddr::format_fixed(o.report.mean) + "\n";
  }
  const auto table_path = ws.out / "ablation.csv";
  const auto runs_path = ws.out / "ablation_runs.csv";
  write_text(table_path, table.to_csv());
  write_text(runs_path, runs);
  rec.output(ws, table_path);
  rec.output(ws, runs_path);
  rec.extra["seeds"] = ws.rc.ablate_seeds;
  rec.write(ws);
  std::cout << table.to_csv();
  return 0;
}

int grad_check(const Workspace& ws, std::size_t num_seeds) {
  reject_paper_shape(ws, "grad-check");
  StageRecord rec{"grad-check"};
  std::vector<ddr::RoutingStrategy> strategies{ddr::RoutingStrategy::soft(), ddr::RoutingStrategy::top_k(1),
                                               ddr::RoutingStrategy::top_k(2), ddr::RoutingStrategy::prior()};
  std::erase_if(strategies, [&](const auto& s) { return s.k > ws.rc.plan.model.num_domains; });
  std::string csv = "strategy,seed,coordinates,max_rel_error,worst_tensor\n";
  double worst = 0.0;
  for (const auto& s : strategies) {
    for (std::uint64_t seed = 1; seed <= num_seeds; ++seed) {
      const auto r = ddr::run_grad_check(ws.rc.plan.model, s, seed);
      char err[32];
      std::snprintf(err, sizeof err, "%.3e", r.max_rel_error);
      csv += r.strategy + "," + std::to_string(seed) + "," + std::to_string(r.coordinates) + "," + err +
             "," + r.worst_tensor + "\n";
      worst = std::max(worst, r.max_rel_error);
    }
  }
  const auto path = ws.out / "grad_check.csv";
  write_text(path, csv);
  rec.output(ws, path);
  rec.write(ws);
  std::cout << csv;
  char line[96];
  std::snprintf(line, sizeof line, "max relative error %.3e (tolerance %.0e)\n", worst, kGradTolerance);
  std::cout << line;
  return worst <= kGradTolerance ? 0 : kExitGradCheck;
}

int param_report(const Workspace& ws) {
  StageRecord rec{"param-report"};
  const auto r = ddr::count_parameters(ws.rc.plan.model);
  char pct[32];
  std::snprintf(pct, sizeof pct, "%.2f%%", 100.0 * r.trainable_fraction);
  std::string csv = "field,value\n";
  csv += "profile," + ws.rc.profile + "\n";
  csv += "backbone_total," + std::to_string(r.backbone_total) + "\n";
  csv += "reference_backbone," + std::to_string(r.reference_backbone) + "\n";
  csv += "general_prefix," + std::to_string(r.general_prefix) + "\n";
  csv += "per_domain_prefix," + std::to_string(r.per_domain_prefix) + "\n";
  csv += "num_domains," + std::to_string(r.num_domains) + "\n";
  csv += "router," + std::to_string(r.router) + "\n";
  csv += "trainable_total," + std::to_string(r.trainable_total) + "\n";
  csv += "per_domain_fraction," + ddr::format_fixed(r.trainable_fraction, 8) + "\n";
  csv += "per_domain_percent," + std::string(pct) + "\n";
  const auto path = ws.out / "param_report.csv";
  write_text(path, csv);
  rec.output(ws, path);
  rec.write(ws);
  std::cout << csv;
  return 0;
}

json load_config_json(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw ddr::ConfigError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ddr::ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

template <typename Fn>
int with_precision(const Workspace& ws, Fn&& fn) {
  if (ws.rc.plan.model.precision == ddr::Precision::F64) return fn.template operator()<double>();
  return fn.template operator()<float>();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic dense retrieval: staged training, indexing and evaluation", "ddr"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> sets;
  std::string output_dir;
  app.add_option("-c,--config", config_path, "run configuration (JSON); DDR_CONFIG is the fallback");
  app.add_option("-s,--set", sets, "override, e.g. domain.epochs=5 (repeatable)")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  app.add_option("-o,--output-dir", output_dir, "shorthand for --set output_dir=DIR");
  app.fallthrough();

  auto* gen = app.add_subcommand("gen-data", "write the synthetic multi-domain dataset");
  auto* vocab = app.add_subcommand("build-vocab", "build vocab.txt from the dataset");
  auto* warm = app.add_subcommand("pretrain-backbone", "warm up the backbone, then freeze it");
  auto* general = app.add_subcommand("train-general", "train the general prefix");
  auto* domain = app.add_subcommand("train-domain", "train the domain prefixes and router");
  auto* index = app.add_subcommand("index", "encode every passage");
  std::string index_source;
  index->add_option("--checkpoint", index_source, "general or domain (default: latest)")
      ->check(CLI::IsMember({"general", "domain"}));
  auto* srch = app.add_subcommand("search", "rank passages for one query");
  SearchArgs sargs;
  srch->add_option("-q,--query", sargs.query, "query text")->required();
  srch->add_option("-t,--task", sargs.task, "task label for prior routing");
  srch->add_option("-k,--top-k", sargs.top_k, "results to return (default eval.k)");
  srch->add_flag("--general-only", sargs.general_only, "use the phase-1 model");
  auto* eval = app.add_subcommand("eval", "score held-out queries against the index");
  bool eval_general = false;
  eval->add_flag("--general-only", eval_general, "evaluate the phase-1 model");
  auto* abl = app.add_subcommand("ablate", "run every routing variant over the ablation seeds");
  auto* gc = app.add_subcommand("grad-check", "compare analytic and numerical gradients");
  std::size_t gc_seeds = 5;
  gc->add_option("--seeds", gc_seeds, "number of seeds per strategy")->check(CLI::PositiveNumber);
  auto* params = app.add_subcommand("param-report", "count trainable parameters");
  std::string profile;
  params->add_option("--profile", profile, "desk or paper-shape");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  const std::string stage = app.get_subcommands().front()->get_name();

  Workspace ws;
  try {
    if (config_path.empty()) {
      if (const char* env = std::getenv("DDR_CONFIG")) config_path = env;
    }
    json j = load_config_json(config_path);
    if (!profile.empty()) {
      // A different profile replaces the model defaults; an explicit model
      // section would describe the other profile.
      j["profile"] = profile;
      j.erase("model");
    }
    for (const auto& s : sets) ddr::apply_override(j, s);
    if (!output_dir.empty()) j["output_dir"] = output_dir;
    ws.rc = ddr::parse_run_config(j);
    ws.resolved = ddr::to_json(ws.rc);
    ws.out = ws.rc.output_dir;
  } catch (const std::exception& e) {
    std::cerr << "ddr " << stage << ": " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    DirectoryLock lock(ws.out);
    if (gen->parsed()) return gen_data(ws);
    if (vocab->parsed()) return build_vocab(ws);
    if (params->parsed()) return param_report(ws);
    if (gc->parsed()) return grad_check(ws, gc_seeds);
    return with_precision(ws, [&]<typename T>() -> int {
      if (warm->parsed()) return pretrain_backbone<T>(ws);
      if (general->parsed()) return train_general<T>(ws);
      if (domain->parsed()) return train_domain<T>(ws);
      if (index->parsed()) return build_index<T>(ws, index_source);
      if (srch->parsed()) return search<T>(ws, sargs);
      if (eval->parsed()) return evaluate<T>(ws, eval_general);
      if (abl->parsed()) return ablate<T>(ws);
      throw StageFailure("unhandled subcommand");
    });
  } catch (const ddr::ConfigError& e) {
    std::cerr << "ddr " << stage << ": " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "ddr " << stage << ": " << e.what() << "\n";
    return kExitStage;
  }
}
