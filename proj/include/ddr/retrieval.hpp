#pragma once

// Exact inner-product search over precomputed passage embeddings, NDCG@k,
// and the evaluation harness.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "ddr/encoder.hpp"
#include "ddr/parallel.hpp"
#include "ddr/serialize.hpp"

namespace ddr {

template <typename T>
class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;
  explicit EmbeddingIndex(std::size_t dim) : dim_(dim) {}

  void add(const std::string& id, Tensor<T> embedding) {
    if (embedding.size() != dim_) {
      throw ShapeError("index: embedding of length " + std::to_string(embedding.size()) +
                       " for dimension " + std::to_string(dim_));
    }
    require_finite(embedding, "index embedding");
    if (!positions_.emplace(id, ids_.size()).second) {
      throw Error("index: duplicate passage id '" + id + "'");
    }
    ids_.push_back(id);
    embeddings_.push_back(std::move(embedding));
  }

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  const std::string& id(std::size_t i) const { return ids_[i]; }
  const Tensor<T>& embedding(std::size_t i) const { return embeddings_[i]; }

  std::vector<std::uint8_t> serialize() const {
    ByteWriter w;
    w.raw("DDRINDEX", 8);
    w.u8(std::is_same_v<T, float> ? 0 : 1);
    w.u64(dim_);
    w.u64(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      w.string(ids_[i]);
      for (T v : embeddings_[i].span()) w.scalar(v);
    }
    return w.take();
  }

  static EmbeddingIndex deserialize(std::vector<std::uint8_t> bytes) {
    ByteReader r(std::move(bytes));
    r.expect_bytes("DDRINDEX");
    if (r.u8() != (std::is_same_v<T, float> ? 0 : 1)) {
      throw FormatError("index: precision mismatch");
    }
    EmbeddingIndex index(r.u64());
    const auto n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string id = r.string();
      Tensor<T> e({index.dim_});
      for (auto& v : e.span()) v = r.scalar<T>();
      index.add(id, std::move(e));
    }
    if (!r.at_end()) throw FormatError("index: trailing bytes");
    return index;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<Tensor<T>> embeddings_;
  std::unordered_map<std::string, std::size_t> positions_;
};

struct ScoredPassage {
  std::string passage_id;
  double score;
};

struct RankedList {
  std::string query_id;
  std::vector<ScoredPassage> entries;  // descending score, ties by ascending id
};

/// query id -> passage id -> grade.
using Qrels = std::map<std::string, std::map<std::string, int>>;

struct PassageRecordTokens {
  std::string id;
  TokenIds tokens;
};

/// One embedding per passage through the passage encoder; independent of
/// domain prefixes and routing.
template <typename T>
EmbeddingIndex<T> build_index(const std::vector<PassageRecordTokens>& passages, const Model<T>& m) {
  if (!m.backbone.frozen) throw Error("build_index: backbone must be frozen");
  std::vector<Tensor<T>> embs(passages.size());
  parallel_for(passages.size(), [&](std::size_t i) {
    embs[i] = encode_passage(passages[i].tokens, m.config, m.backbone, m.prefixes).embedding;
  });
  EmbeddingIndex<T> index(m.config.model_dim);
  for (std::size_t i = 0; i < passages.size(); ++i) index.add(passages[i].id, std::move(embs[i]));
  return index;
}

/// Exact top-k by inner product.
template <typename T>
RankedList search(const EmbeddingIndex<T>& index, const Tensor<T>& query, std::size_t top_k,
                  const std::string& query_id = {}) {
  if (top_k < 1) throw Error("search: top_k must be >= 1");
  if (query.size() != index.dim()) {
    throw ShapeError("search: query dimension " + std::to_string(query.size()) +
                     " vs index dimension " + std::to_string(index.dim()));
  }
  std::vector<std::pair<T, std::size_t>> scored(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    scored[i] = {dot(query.span(), index.embedding(i).span()), i};
  }
  auto better = [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return index.id(a.second) < index.id(b.second);
  };
  const std::size_t keep = std::min(top_k, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep),
                    scored.end(), better);
  RankedList out{query_id, {}};
  out.entries.reserve(keep);
  for (std::size_t r = 0; r < keep; ++r) {
    out.entries.push_back({index.id(scored[r].second), static_cast<double>(scored[r].first)});
  }
  return out;
}

/// Trec-style NDCG@k with gain 2^rel - 1 and discount log2(rank + 1). The
/// ideal ordering is over every judged passage for the query. Returns nullopt
/// when the query has no relevant passage.
inline std::optional<double> ndcg_at_k(const RankedList& ranked,
                                       const std::map<std::string, int>& judged, std::size_t k) {
  if (k < 1) throw Error("ndcg_at_k: k must be >= 1");
  std::vector<int> grades;
  for (const auto& [id, g] : judged) {
    if (g < 0) throw Error("ndcg_at_k: negative grade for '" + id + "'");
    if (g > 0) grades.push_back(g);
  }
  if (grades.empty()) return std::nullopt;
  std::sort(grades.begin(), grades.end(), std::greater<>());
  double ideal = 0.0;
  for (std::size_t r = 0; r < std::min(k, grades.size()); ++r) {
    ideal += (std::exp2(grades[r]) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
  }
  double dcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, ranked.entries.size()); ++r) {
    auto it = judged.find(ranked.entries[r].passage_id);
    const int g = it == judged.end() ? 0 : it->second;
    if (g > 0) dcg += (std::exp2(g) - 1.0) / std::log2(static_cast<double>(r) + 2.0);
  }
  return dcg / ideal;
}

inline std::optional<double> ndcg_at_k(const RankedList& ranked, const Qrels& qrels,
                                       std::size_t k) {
  auto it = qrels.find(ranked.query_id);
  if (it == qrels.end()) return std::nullopt;
  return ndcg_at_k(ranked, it->second, k);
}

struct EvalQuery {
  std::string id;
  TokenIds tokens;
  std::string task_label;
};

struct EvalOptions {
  std::size_t k = 10;
  /// Encode queries with the general prefix only (the phase-1 model).
  bool general_only = false;
};

struct EvalReport {
  std::vector<std::pair<std::string, double>> per_query;  // evaluable queries, input order
  double mean = 0.0;
  std::vector<RankedList> runs;  // every query, input order
};

/// Encodes every query with the router's strategy (or the general prefix only),
/// searches the index, and averages NDCG@k over queries with relevant passages.
template <typename T>
EvalReport evaluate(const Model<T>& m, const EmbeddingIndex<T>& index,
                    const std::vector<EvalQuery>& queries, const Qrels& qrels,
                    const DomainMap* domain_map, const EvalOptions& opts = {}) {
  const bool needs_labels = !opts.general_only && m.router.strategy.needs_task_domains();
  std::vector<const std::vector<std::size_t>*> domains(queries.size(), nullptr);
  if (needs_labels) {
    std::vector<std::string> missing;
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const auto& label = queries[i].task_label;
      if (label.empty() || !domain_map || !domain_map->has_task(label)) {
        missing.push_back(queries[i].id);
      } else {
        domains[i] = &domain_map->lookup(label);
      }
    }
    if (!missing.empty()) {
      std::string msg = "evaluate: strategy '" + m.router.strategy.name() +
                        "' needs task labels; missing or unknown for queries:";
      for (const auto& id : missing) msg += " " + id;
      throw Error(msg);
    }
  }
  EvalReport report;
  report.runs.resize(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) {
    const auto& q = queries[i];
    const Tensor<T> emb =
        opts.general_only
            ? encode_passage(q.tokens, m.config, m.backbone, m.prefixes).embedding
            : encode_query(q.tokens, m.config, m.backbone, m.prefixes, m.router, domains[i])
                  .embedding;
    report.runs[i] = search(index, emb, opts.k, q.id);
  });
  double total = 0.0;
  for (const auto& run : report.runs) {
    if (auto v = ndcg_at_k(run, qrels, opts.k)) {
      report.per_query.emplace_back(run.query_id, *v);
      total += *v;
    }
  }
  report.mean = report.per_query.empty() ? 0.0 : total / static_cast<double>(report.per_query.size());
  return report;
}

inline std::string format_fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// TSV: query_id, passage_id, rank (1-based), score.
inline std::string format_run_file(const std::vector<RankedList>& runs) {
  std::string out;
  for (const auto& run : runs) {
    for (std::size_t r = 0; r < run.entries.size(); ++r) {
      out += run.query_id + '\t' + run.entries[r].passage_id + '\t' + std::to_string(r + 1) +
             '\t' + format_fixed(run.entries[r].score) + '\n';
    }
  }
  return out;
}

/// CSV: query_id,ndcg@10 per evaluable query plus a trailing "mean" row.
inline std::string format_report_csv(const EvalReport& report, std::size_t k = 10) {
  std::string out = "query_id,ndcg@" + std::to_string(k) + "\n";
  for (const auto& [id, v] : report.per_query) out += id + "," + format_fixed(v) + "\n";
  out += "mean," + format_fixed(report.mean) + "\n";
  return out;
}

}  // namespace ddr
