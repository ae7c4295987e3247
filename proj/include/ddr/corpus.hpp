#pragma once

// Vocabulary, tokenization, dataset files, and the synthetic multi-domain
// benchmark generator.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "ddr/encoder.hpp"
#include "ddr/random.hpp"
#include "ddr/retrieval.hpp"
#include "ddr/routing.hpp"
#include "ddr/serialize.hpp"
#include "ddr/training.hpp"

namespace ddr {

class DataError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr std::int32_t kClsId = 2;

/// Lowercased words; ASCII characters other than letters, digits and '_' separate words.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char ch : text) {
    const bool word_char = ch >= 0x80 || std::isalnum(ch) || ch == '_';
    if (word_char) {
      cur.push_back(ch < 0x80 ? static_cast<char>(std::tolower(ch)) : static_cast<char>(ch));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

class Vocabulary {
 public:
  static inline const std::vector<std::string> kReserved{"[PAD]", "[UNK]", "[CLS]"};

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// `tokens` excludes the reserved entries, which always occupy ids 0..2.
  explicit Vocabulary(const std::vector<std::string>& tokens) {
    for (const auto& t : kReserved) push(t);
    for (const auto& t : tokens) push(t);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::int32_t id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  /// One token per line in id order, reserved tokens first.
  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) out += t + '\n';
    return out;
  }

  static Vocabulary parse(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    if (lines.size() < kReserved.size() ||
        !std::equal(kReserved.begin(), kReserved.end(), lines.begin())) {
      throw DataError("vocabulary: reserved tokens missing at the top of the file");
    }
    return Vocabulary(std::vector<std::string>(lines.begin() + 3, lines.end()));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void push(const std::string& t) {
    if (t.empty()) throw DataError("vocabulary: empty token");
    if (!ids_.emplace(t, static_cast<std::int32_t>(tokens_.size())).second) {
      throw DataError("vocabulary: duplicate token '" + t + "'");
    }
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

/// Keeps words with count >= min_count, ordered by (count desc, word asc).
inline Vocabulary build_vocab(const std::vector<std::string>& texts, std::size_t min_count) {
  if (texts.empty()) throw DataError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : texts) {
    for (auto& w : split_words(t)) ++counts[w];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [w, n] : counts) {
    if (n >= min_count && std::find(Vocabulary::kReserved.begin(), Vocabulary::kReserved.end(), w) ==
                              Vocabulary::kReserved.end()) {
      kept.emplace_back(w, n);
    }
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  for (auto& [w, n] : kept) tokens.push_back(w);
  return Vocabulary(tokens);
}

/// [CLS] followed by word ids (UNK for unknown words), truncated to max_len.
inline TokenIds tokenize(const std::string& text, const Vocabulary& vocab, std::size_t max_len) {
  TokenIds ids{kClsId};
  for (const auto& w : split_words(text)) {
    if (ids.size() >= max_len) break;
    ids.push_back(vocab.id(w));
  }
  if (ids.size() > max_len) ids.resize(max_len);
  return ids;
}

struct PassageRecord {
  std::string id;
  std::string text;
  friend bool operator==(const PassageRecord&, const PassageRecord&) = default;
};

struct QueryRecord {
  std::string id;
  std::string text;
  std::string task_label;  // empty when unlabelled
  friend bool operator==(const QueryRecord&, const QueryRecord&) = default;
};

struct Dataset {
  std::vector<PassageRecord> passages;
  std::vector<QueryRecord> train_queries;
  std::vector<QueryRecord> test_queries;
  std::vector<QueryRecord> general_queries;  // unlabelled, for warm-up and phase 1
  Qrels qrels;
  DomainMap domain_map;
  /// Fixed training negatives per query id, in file order. Queries without
  /// an entry get negatives sampled uniformly during training.
  std::map<std::string, std::vector<std::string>> negatives;
};

struct DatasetPaths {
  std::string passages;
  std::string train_queries;
  std::string test_queries;
  std::string general_queries;  // optional
  std::string qrels;
  std::string domain_map;
  std::string negatives;  // optional

  static DatasetPaths in_directory(const std::string& dir) {
    namespace fs = std::filesystem;
    auto p = [&](const char* name) { return (fs::path(dir) / name).string(); };
    return {p("passages.jsonl"), p("queries_train.jsonl"), p("queries_test.jsonl"),
            p("queries_general.jsonl"), p("qrels.tsv"), p("domain_map.jsonl"),
            p("negatives.tsv")};
  }
};

namespace detail {

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline std::string where(const std::string& path, std::size_t line) {
  return path + ":" + std::to_string(line + 1);
}

inline nlohmann::json parse_json_line(const std::string& path, std::size_t n,
                                      const std::string& line) {
  try {
    auto j = nlohmann::json::parse(line);
    if (!j.is_object()) throw DataError(where(path, n) + ": expected a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where(path, n) + ": malformed line: " + e.what());
  }
}

inline std::string required_string(const nlohmann::json& j, const char* key,
                                   const std::string& path, std::size_t n) {
  if (!j.contains(key) || !j[key].is_string()) {
    throw DataError(where(path, n) + ": missing string field '" + key + "'");
  }
  return j[key].get<std::string>();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  write_file(path, bytes);
}

}  // namespace detail

inline std::vector<PassageRecord> read_passages(const std::string& path) {
  std::vector<PassageRecord> out;
  std::set<std::string> seen;
  const auto lines = detail::read_lines(path);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (lines[n].empty()) continue;
    auto j = detail::parse_json_line(path, n, lines[n]);
    PassageRecord p{detail::required_string(j, "id", path, n),
                    detail::required_string(j, "text", path, n)};
    if (p.id.empty()) throw DataError(detail::where(path, n) + ": empty passage id");
    if (!seen.insert(p.id).second) {
      throw DataError(detail::where(path, n) + ": duplicate passage id '" + p.id + "'");
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<QueryRecord> read_queries(const std::string& path) {
  std::vector<QueryRecord> out;
  std::set<std::string> seen;
  const auto lines = detail::read_lines(path);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (lines[n].empty()) continue;
    auto j = detail::parse_json_line(path, n, lines[n]);
    QueryRecord q{detail::required_string(j, "id", path, n),
                  detail::required_string(j, "text", path, n), ""};
    if (j.contains("task_label") && !j["task_label"].is_null()) {
      if (!j["task_label"].is_string()) {
        throw DataError(detail::where(path, n) + ": task_label must be a string");
      }
      q.task_label = j["task_label"].get<std::string>();
    }
    if (q.id.empty()) throw DataError(detail::where(path, n) + ": empty query id");
    if (!seen.insert(q.id).second) {
      throw DataError(detail::where(path, n) + ": duplicate query id '" + q.id + "'");
    }
    out.push_back(std::move(q));
  }
  return out;
}

/// TSV lines: query_id, passage_id, grade.
inline Qrels read_qrels(const std::string& path) {
  Qrels out;
  const auto lines = detail::read_lines(path);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (lines[n].empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(lines[n]);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 3) throw DataError(detail::where(path, n) + ": expected 3 tab-separated fields");
    int grade = 0;
    try {
      std::size_t used = 0;
      grade = std::stoi(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw DataError(detail::where(path, n) + ": bad grade '" + fields[2] + "'");
    }
    if (grade < 0) throw DataError(detail::where(path, n) + ": negative grade");
    out[fields[0]][fields[1]] = grade;
  }
  return out;
}

/// TSV lines: query_id, passage_id. Order within a query is kept.
inline std::map<std::string, std::vector<std::string>> read_negatives(const std::string& path) {
  std::map<std::string, std::vector<std::string>> out;
  const auto lines = detail::read_lines(path);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    if (lines[n].empty()) continue;
    const auto tab = lines[n].find('\t');
    if (tab == std::string::npos || lines[n].find('\t', tab + 1) != std::string::npos || tab == 0 ||
        tab + 1 == lines[n].size()) {
      throw DataError(detail::where(path, n) + ": expected 2 tab-separated fields");
    }
    out[lines[n].substr(0, tab)].push_back(lines[n].substr(tab + 1));
  }
  return out;
}

/// First line {"domains": [...]}, then one {"task": ..., "domains": [...]} per line.
inline DomainMap read_domain_map(const std::string& path) {
  const auto lines = detail::read_lines(path);
  std::size_t n = 0;
  while (n < lines.size() && lines[n].empty()) ++n;
  if (n == lines.size()) throw DataError(path + ": empty domain map");
  auto header = detail::parse_json_line(path, n, lines[n]);
  if (!header.contains("domains") || !header["domains"].is_array()) {
    throw DataError(detail::where(path, n) + ": first record must declare \"domains\"");
  }
  DomainMap map;
  try {
    map = DomainMap(header["domains"].get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(detail::where(path, n) + ": " + e.what());
  }
  for (++n; n < lines.size(); ++n) {
    if (lines[n].empty()) continue;
    auto j = detail::parse_json_line(path, n, lines[n]);
    const auto task = detail::required_string(j, "task", path, n);
    if (!j.contains("domains") || !j["domains"].is_array()) {
      throw DataError(detail::where(path, n) + ": missing \"domains\" list");
    }
    try {
      map.add_task(task, j["domains"].get<std::vector<std::string>>());
    } catch (const Error& e) {
      throw DataError(detail::where(path, n) + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(detail::where(path, n) + ": " + e.what());
    }
  }
  return map;
}

inline std::string format_passages(const std::vector<PassageRecord>& passages) {
  std::string out;
  for (const auto& p : passages) out += nlohmann::json{{"id", p.id}, {"text", p.text}}.dump() + '\n';
  return out;
}

inline std::string format_queries(const std::vector<QueryRecord>& queries) {
  std::string out;
  for (const auto& q : queries) {
    nlohmann::json j{{"id", q.id}, {"text", q.text}};
    if (!q.task_label.empty()) j["task_label"] = q.task_label;
    out += j.dump() + '\n';
  }
  return out;
}

inline std::string format_qrels(const Qrels& qrels) {
  std::string out;
  for (const auto& [q, judged] : qrels) {
    for (const auto& [p, g] : judged) out += q + '\t' + p + '\t' + std::to_string(g) + '\n';
  }
  return out;
}

inline std::string format_negatives(const std::map<std::string, std::vector<std::string>>& negs) {
  std::string out;
  for (const auto& [q, ids] : negs) {
    for (const auto& p : ids) out += q + '\t' + p + '\n';
  }
  return out;
}

inline std::string format_domain_map(const DomainMap& map) {
  std::string out = nlohmann::json{{"domains", map.domains()}}.dump() + '\n';
  for (const auto& [task, ids] : map.tasks()) {
    std::vector<std::string> names;
    for (auto i : ids) names.push_back(map.domains()[i]);
    out += nlohmann::json{{"task", task}, {"domains", names}}.dump() + '\n';
  }
  return out;
}

/// Checks referential integrity. With `require_labels`, every train/test query
/// must carry a task label known to the domain map.
inline void validate_dataset(const Dataset& d, bool require_labels) {
  std::set<std::string> passage_ids, query_ids;
  for (const auto& p : d.passages) passage_ids.insert(p.id);
  for (const auto* qs : {&d.train_queries, &d.test_queries, &d.general_queries}) {
    for (const auto& q : *qs) {
      if (!query_ids.insert(q.id).second) {
        throw DataError("dataset: query id '" + q.id + "' appears in more than one query file");
      }
    }
  }
  std::vector<std::string> dangling;
  for (const auto& [q, judged] : d.qrels) {
    if (!query_ids.count(q)) dangling.push_back("query " + q);
    for (const auto& [p, g] : judged) {
      if (!passage_ids.count(p)) dangling.push_back("passage " + p);
    }
  }
  for (const auto& [q, ids] : d.negatives) {
    if (!query_ids.count(q)) dangling.push_back("query " + q);
    std::set<std::string> seen;
    for (const auto& p : ids) {
      if (!passage_ids.count(p)) dangling.push_back("passage " + p);
      if (!seen.insert(p).second) {
        throw DataError("dataset: negative passage " + p + " repeated for query " + q);
      }
      auto it = d.qrels.find(q);
      if (it != d.qrels.end() && it->second.count(p) && it->second.at(p) > 0) {
        throw DataError("dataset: passage " + p + " is both relevant and a negative for query " + q);
      }
    }
  }
  if (!dangling.empty()) {
    std::string msg = "dataset: qrels or negatives reference unknown ids:";
    for (const auto& s : dangling) msg += " " + s;
    throw DataError(msg);
  }
  std::vector<std::string> bad_labels;
  for (const auto* qs : {&d.train_queries, &d.test_queries}) {
    for (const auto& q : *qs) {
      if (!q.task_label.empty() && !d.domain_map.has_task(q.task_label)) {
        bad_labels.push_back(q.id + "(" + q.task_label + ")");
      } else if (require_labels && q.task_label.empty()) {
        bad_labels.push_back(q.id + "(unlabelled)");
      }
    }
  }
  if (!bad_labels.empty()) {
    std::string msg = "dataset: queries with missing or unknown task labels:";
    for (const auto& s : bad_labels) msg += " " + s;
    throw DataError(msg);
  }
}

inline Dataset load_dataset(const DatasetPaths& paths, bool require_labels = false) {
  Dataset d;
  d.passages = read_passages(paths.passages);
  d.train_queries = read_queries(paths.train_queries);
  d.test_queries = read_queries(paths.test_queries);
  if (!paths.general_queries.empty() && std::filesystem::exists(paths.general_queries)) {
    d.general_queries = read_queries(paths.general_queries);
  }
  d.qrels = read_qrels(paths.qrels);
  d.domain_map = read_domain_map(paths.domain_map);
  if (!paths.negatives.empty() && std::filesystem::exists(paths.negatives)) {
    d.negatives = read_negatives(paths.negatives);
  }
  validate_dataset(d, require_labels);
  return d;
}

inline void write_dataset(const Dataset& d, const DatasetPaths& paths) {
  detail::write_text(paths.passages, format_passages(d.passages));
  detail::write_text(paths.train_queries, format_queries(d.train_queries));
  detail::write_text(paths.test_queries, format_queries(d.test_queries));
  if (!paths.general_queries.empty()) {
    detail::write_text(paths.general_queries, format_queries(d.general_queries));
  }
  detail::write_text(paths.qrels, format_qrels(d.qrels));
  detail::write_text(paths.domain_map, format_domain_map(d.domain_map));
  if (!paths.negatives.empty() && !d.negatives.empty()) {
    detail::write_text(paths.negatives, format_negatives(d.negatives));
  }
}

/// Every passage and query text, for vocabulary construction.
inline std::vector<std::string> dataset_texts(const Dataset& d) {
  std::vector<std::string> texts;
  for (const auto& p : d.passages) texts.push_back(p.text);
  for (const auto* qs : {&d.train_queries, &d.test_queries, &d.general_queries}) {
    for (const auto& q : *qs) texts.push_back(q.text);
  }
  return texts;
}

inline std::vector<PassageRecordTokens> tokenize_passages(const Dataset& d, const Vocabulary& v,
                                                          std::size_t max_len) {
  std::vector<PassageRecordTokens> out;
  for (const auto& p : d.passages) out.push_back({p.id, tokenize(p.text, v, max_len)});
  return out;
}

inline std::vector<EvalQuery> tokenize_queries(const std::vector<QueryRecord>& queries,
                                               const Vocabulary& v, std::size_t max_len) {
  std::vector<EvalQuery> out;
  for (const auto& q : queries) out.push_back({q.id, tokenize(q.text, v, max_len), q.task_label});
  return out;
}

/// Training examples for queries with at least one relevant passage. The
/// positive is the highest-graded passage (ties by id); other relevant
/// passages are excluded from negative sampling. Fixed negatives from the
/// dataset are carried over.
inline TrainingData make_training_data(const Dataset& d, const std::vector<QueryRecord>& queries,
                                       const Vocabulary& v, std::size_t max_len) {
  TrainingData data;
  std::map<std::string, std::size_t> position;
  for (std::size_t i = 0; i < d.passages.size(); ++i) {
    position[d.passages[i].id] = i;
    data.passages.push_back(tokenize(d.passages[i].text, v, max_len));
  }
  for (const auto& q : queries) {
    auto it = d.qrels.find(q.id);
    if (it == d.qrels.end()) continue;
    std::string best;
    int best_grade = 0;
    std::vector<std::size_t> relevant;
    for (const auto& [pid, g] : it->second) {
      if (g <= 0) continue;
      relevant.push_back(position.at(pid));
      if (g > best_grade) {
        best_grade = g;
        best = pid;
      }
    }
    if (best.empty()) continue;
    TrainExample ex;
    ex.query = tokenize(q.text, v, max_len);
    ex.task_label = q.task_label;
    ex.positive = position.at(best);
    for (auto r : relevant) {
      if (r != ex.positive) ex.also_relevant.push_back(r);
    }
    if (auto neg = d.negatives.find(q.id); neg != d.negatives.end()) {
      for (const auto& pid : neg->second) ex.negatives.push_back(position.at(pid));
    }
    data.examples.push_back(std::move(ex));
  }
  return data;
}

/// Mean recall@k of a lexical baseline: score = number of distinct shared words.
inline double bag_of_words_recall(const Dataset& d, const std::vector<QueryRecord>& queries,
                                  std::size_t k = 10) {
  std::vector<std::set<std::string>> bags;
  for (const auto& p : d.passages) {
    auto w = split_words(p.text);
    bags.emplace_back(w.begin(), w.end());
  }
  std::size_t hits = 0, total = 0;
  for (const auto& q : queries) {
    auto it = d.qrels.find(q.id);
    if (it == d.qrels.end()) continue;
    auto words = split_words(q.text);
    std::set<std::string> qbag(words.begin(), words.end());
    std::vector<std::pair<int, std::size_t>> scored;
    for (std::size_t i = 0; i < bags.size(); ++i) {
      int s = 0;
      for (const auto& w : qbag) s += static_cast<int>(bags[i].count(w));
      scored.emplace_back(s, i);
    }
    std::stable_sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return d.passages[a.second].id < d.passages[b.second].id;
    });
    bool hit = false;
    for (std::size_t r = 0; r < std::min(k, scored.size()); ++r) {
      auto g = it->second.find(d.passages[scored[r].second].id);
      if (g != it->second.end() && g->second > 0) hit = true;
    }
    hits += hit ? 1 : 0;
    ++total;
  }
  return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

/// Parameters of the synthetic multi-domain retrieval task.
///
/// Every domain owns a signature vocabulary: `overlap_ratio` of it is a pool
/// shared by all domains, the rest is exclusive. Passages come in families:
/// one member per domain, all members carrying the same key words from the
/// shared pool plus their own domain's exclusive words. A query repeats its
/// gold passage's key words, so lexically it matches the whole family and
/// only the task's domains tell the members apart. Multi-domain queries
/// belong to a two-domain task and carry a style word naming the gold
/// passage's domain; style words never occur in passages.
struct SyntheticSpec {
  std::size_t num_domains = 3;
  std::size_t signature_size = 48;
  double overlap_ratio = 0.5;
  std::size_t passages_per_domain = 100;
  std::size_t train_queries_per_domain = 30;
  std::size_t test_queries_per_domain = 10;
  double multi_domain_fraction = 1.0 / 3.0;
  std::size_t key_words = 3;
  std::size_t exclusive_words = 6;
  std::size_t passage_fillers = 3;
  std::size_t query_fillers = 2;
  std::size_t filler_vocab = 24;
  std::size_t general_queries_per_passage = 4;
  std::size_t general_query_words = 4;
  std::size_t general_key_words = 3;
  /// Write the gold passage's family members in other domains as fixed
  /// negatives of each labelled training query (passages relevant to the
  /// words but not to the task).
  bool family_negatives = true;
  /// Domain vocabulary: each passage carries `topic_words` of its domain's
  /// `topic_pool` words, and a general query names one of them with
  /// probability `general_topic_prob`. Labelled queries never contain them.
  std::size_t topic_pool = 4;
  std::size_t topic_words = 2;
  double general_topic_prob = 0.5;
  std::uint64_t seed = 1;

  std::size_t shared_pool() const {
    return static_cast<std::size_t>(std::llround(overlap_ratio * static_cast<double>(signature_size)));
  }
  std::size_t exclusive_pool() const { return signature_size - shared_pool(); }

  void validate() const {
    if (num_domains < 1) throw DataError("synthetic: num_domains must be >= 1");
    if (!(overlap_ratio >= 0.0 && overlap_ratio <= 1.0)) {
      throw DataError("synthetic: overlap_ratio must be in [0, 1]");
    }
    if (!(multi_domain_fraction >= 0.0 && multi_domain_fraction <= 1.0)) {
      throw DataError("synthetic: multi_domain_fraction must be in [0, 1]");
    }
    if (multi_domain_fraction > 0.0 && num_domains < 2) {
      throw DataError("synthetic: multi-domain queries need at least two domains");
    }
    const bool families = shared_pool() > 0 && num_domains > 1;
    const std::size_t key_pool = families ? shared_pool() : exclusive_pool();
    if (key_words < 1 || key_pool < key_words) {
      throw DataError("synthetic: signature too small for the requested key words");
    }
    if (exclusive_pool() < exclusive_words + (families ? 0 : key_words)) {
      throw DataError("synthetic: exclusive pool too small for the requested passage words");
    }
    if (filler_vocab < 1) throw DataError("synthetic: filler_vocab must be >= 1");
    if (general_key_words > general_query_words) {
      throw DataError("synthetic: general_key_words exceeds general_query_words");
    }
    if (topic_words > topic_pool) throw DataError("synthetic: topic_words exceeds topic_pool");
    if (!(general_topic_prob >= 0.0 && general_topic_prob <= 1.0)) {
      throw DataError("synthetic: general_topic_prob must be in [0, 1]");
    }
    if (passages_per_domain < train_queries_per_domain + test_queries_per_domain) {
      throw DataError("synthetic: more queries per domain than passages");
    }
  }
};

inline nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"num_domains", s.num_domains},
          {"signature_size", s.signature_size},
          {"overlap_ratio", s.overlap_ratio},
          {"passages_per_domain", s.passages_per_domain},
          {"train_queries_per_domain", s.train_queries_per_domain},
          {"test_queries_per_domain", s.test_queries_per_domain},
          {"multi_domain_fraction", s.multi_domain_fraction},
          {"key_words", s.key_words},
          {"exclusive_words", s.exclusive_words},
          {"passage_fillers", s.passage_fillers},
          {"query_fillers", s.query_fillers},
          {"filler_vocab", s.filler_vocab},
          {"general_queries_per_passage", s.general_queries_per_passage},
          {"general_query_words", s.general_query_words},
          {"general_key_words", s.general_key_words},
          {"family_negatives", s.family_negatives},
          {"topic_pool", s.topic_pool},
          {"topic_words", s.topic_words},
          {"general_topic_prob", s.general_topic_prob},
          {"seed", s.seed}};
}

inline std::vector<std::string> default_domain_names(std::size_t n) {
  static const std::vector<std::string> names{"science", "qa", "fact-checking", "wikipedia",
                                              "summarization"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(i < names.size() ? names[i] : "domain" + std::to_string(i));
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> draw_distinct(Rng& rng, std::size_t pool, std::size_t count) {
  std::vector<std::size_t> all(pool);
  for (std::size_t i = 0; i < pool; ++i) all[i] = i;
  for (std::size_t i = 0; i < count; ++i) std::swap(all[i], all[i + rng.index(pool - i)]);
  all.resize(count);
  return all;
}

inline std::string join_words(std::vector<std::string> words, Rng& rng) {
  rng.shuffle(words);
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

inline std::string id_number(std::size_t n) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", n);
  return buf;
}

}  // namespace detail

/// Builds the synthetic dataset in memory. Deterministic in the spec.
inline Dataset synthesize(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t N = spec.num_domains;
  const bool families = spec.shared_pool() > 0 && N > 1;
  const auto names = default_domain_names(N);

  auto shared_word = [](std::size_t j) { return "k" + std::to_string(j); };
  auto exclusive_word = [](std::size_t d, std::size_t j) {
    return "x" + std::to_string(d) + "n" + std::to_string(j);
  };
  auto filler_word = [](std::size_t j) { return "w" + std::to_string(j); };
  auto style_word = [](std::size_t d) { return "s" + std::to_string(d); };
  auto topic_word = [](std::size_t d, std::size_t j) {
    return "t" + std::to_string(d) + "n" + std::to_string(j);
  };

  Dataset ds;
  ds.domain_map = DomainMap(names);
  // passage_keys[d][i]: key words of passage i in domain d.
  std::vector<std::vector<std::vector<std::string>>> passage_keys(N);
  std::vector<std::vector<std::size_t>> passage_index(N);
  // Per passage in file order: key words, exclusive words, topic words.
  struct PassageWords {
    std::vector<std::string> keys, exclusive, topics;
  };
  std::vector<PassageWords> passage_words;
  std::set<std::vector<std::size_t>> used_keys;
  for (std::size_t f = 0; f < spec.passages_per_domain; ++f) {
    std::vector<std::size_t> family_keys;
    if (families) {
      do {
        family_keys = detail::draw_distinct(rng, spec.shared_pool(), spec.key_words);
        std::sort(family_keys.begin(), family_keys.end());
      } while (!used_keys.insert(family_keys).second && used_keys.size() < 100000);
    }
    for (std::size_t d = 0; d < N; ++d) {
      std::vector<std::string> words, keys;
      auto excl = detail::draw_distinct(
          rng, spec.exclusive_pool(), spec.exclusive_words + (families ? 0 : spec.key_words));
      if (families) {
        for (auto k : family_keys) keys.push_back(shared_word(k));
      } else {
        for (std::size_t i = 0; i < spec.key_words; ++i) {
          keys.push_back(exclusive_word(d, excl[spec.exclusive_words + i]));
        }
      }
      for (std::size_t i = 0; i < spec.exclusive_words; ++i) words.push_back(exclusive_word(d, excl[i]));
      std::vector<std::string> topics;
      for (auto t : detail::draw_distinct(rng, spec.topic_pool, spec.topic_words)) {
        topics.push_back(topic_word(d, t));
      }
      passage_words.push_back({keys, words, topics});
      words.insert(words.end(), keys.begin(), keys.end());
      words.insert(words.end(), topics.begin(), topics.end());
      for (std::size_t i = 0; i < spec.passage_fillers; ++i) {
        words.push_back(filler_word(rng.index(spec.filler_vocab)));
      }
      passage_index[d].push_back(ds.passages.size());
      passage_keys[d].push_back(keys);
      ds.passages.push_back({"p-" + std::to_string(d) + "-" + detail::id_number(f),
                             detail::join_words(words, rng)});
    }
  }

  std::set<std::vector<std::size_t>> tasks_seen;
  auto task_for = [&](std::vector<std::size_t> dom) {
    std::sort(dom.begin(), dom.end());
    std::string label = "task";
    std::vector<std::string> dn;
    for (auto d : dom) {
      label += (dn.empty() ? "-" : "+") + names[d];
      dn.push_back(names[d]);
    }
    if (tasks_seen.insert(dom).second) ds.domain_map.add_task(label, dn);
    return label;
  };
  // Single-domain tasks always exist so every domain is addressable.
  for (std::size_t d = 0; d < N; ++d) task_for({d});

  std::size_t next_query = 0;
  auto make_queries = [&](std::size_t per_domain, const char* split,
                          std::vector<QueryRecord>& out, std::vector<std::size_t>& cursor,
                          const std::vector<std::vector<std::size_t>>& order) {
    for (std::size_t d = 0; d < N; ++d) {
      const auto multi = static_cast<std::size_t>(
          std::llround(spec.multi_domain_fraction * static_cast<double>(per_domain)));
      for (std::size_t i = 0; i < per_domain; ++i) {
        const std::size_t local = order[d][cursor[d]++];
        std::vector<std::string> words = passage_keys[d][local];
        std::string label;
        if (i < multi) {
          std::size_t partner = rng.index(N - 1);
          if (partner >= d) ++partner;
          label = task_for({d, partner});
          words.push_back(style_word(d));
        } else {
          label = task_for({d});
        }
        for (std::size_t k = 0; k < spec.query_fillers; ++k) {
          words.push_back(filler_word(rng.index(spec.filler_vocab)));
        }
        const std::string id = std::string("q-") + split + "-" + detail::id_number(next_query++);
        out.push_back({id, detail::join_words(words, rng), label});
        const std::size_t gold = passage_index[d][local];
        ds.qrels[id][ds.passages[gold].id] = 1;
        if (std::string(split) == "train" && spec.family_negatives && families) {
          for (std::size_t e = 0; e < N; ++e) {
            if (e != d) ds.negatives[id].push_back(ds.passages[passage_index[e][local]].id);
          }
        }
      }
    }
  };
  // Each gold passage is used by at most one query across both splits.
  std::vector<std::vector<std::size_t>> order(N);
  for (std::size_t d = 0; d < N; ++d) {
    order[d].resize(spec.passages_per_domain);
    for (std::size_t i = 0; i < spec.passages_per_domain; ++i) order[d][i] = i;
    rng.shuffle(order[d]);
  }
  std::vector<std::size_t> cursor(N, 0);
  make_queries(spec.train_queries_per_domain, "train", ds.train_queries, cursor, order);
  make_queries(spec.test_queries_per_domain, "test", ds.test_queries, cursor, order);

  // General queries: some of a passage's key words and exclusive words, maybe a
  // topic word, plus random filler noise, unlabelled, with an occasional style word as noise.
  for (std::size_t p = 0; p < ds.passages.size(); ++p) {
    const auto& [keys, excl, topics] = passage_words[p];
    for (std::size_t r = 0; r < spec.general_queries_per_passage; ++r) {
      std::vector<std::string> q;
      const std::size_t nk = std::min(keys.size(), spec.general_key_words);
      for (auto i : detail::draw_distinct(rng, keys.size(), nk)) q.push_back(keys[i]);
      const std::size_t ne = std::min(excl.size(), spec.general_query_words - nk);
      for (auto i : detail::draw_distinct(rng, excl.size(), ne)) q.push_back(excl[i]);
      if (!topics.empty() && rng.uniform() < spec.general_topic_prob) {
        q.push_back(topics[rng.index(topics.size())]);
      }
      for (std::size_t k = 0; k < spec.query_fillers; ++k) {
        q.push_back(filler_word(rng.index(spec.filler_vocab)));
      }
      if (N > 1 && rng.uniform() < 0.3) q.push_back(style_word(rng.index(N)));
      const std::string id = "q-general-" + detail::id_number(next_query++);
      ds.general_queries.push_back({id, detail::join_words(q, rng), ""});
      ds.qrels[id][ds.passages[p].id] = 1;
    }
  }
  validate_dataset(ds, true);
  return ds;
}

/// Writes the synthetic dataset plus manifest.json (spec, seed, checksums and
/// the lexical-baseline recall measured at generation time).
inline nlohmann::json generate_synthetic(const SyntheticSpec& spec, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const Dataset ds = synthesize(spec);
  const auto paths = DatasetPaths::in_directory(dir);
  write_dataset(ds, paths);
  nlohmann::json manifest;
  manifest["generator"] = "synthetic-multi-domain";
  manifest["spec"] = to_json(spec);
  manifest["seed"] = spec.seed;
  std::vector<QueryRecord> labelled = ds.train_queries;
  labelled.insert(labelled.end(), ds.test_queries.begin(), ds.test_queries.end());
  manifest["bag_of_words_recall_at_10"] = bag_of_words_recall(ds, labelled, 10);
  nlohmann::json sums = nlohmann::json::object();
  std::vector<std::string> files{paths.passages, paths.train_queries, paths.test_queries,
                                 paths.general_queries, paths.qrels, paths.domain_map};
  if (!ds.negatives.empty()) files.push_back(paths.negatives);
  for (const auto& p : files) {
    sums[fs::path(p).filename().string()] = file_checksum(p);
  }
  manifest["checksums"] = sums;
  detail::write_text((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
  return manifest;
}

}  // namespace ddr
