#pragma once

#include <cstdint>
#include <string>

#include "ddr/tensor.hpp"

namespace ddr {

enum class Pooling { FirstToken, Mean };
enum class Precision { F32, F64 };

/// How the general prefix and the routed domain mixture form the query prefix.
/// Concat: [P^g ; sum_i w_i P^d_i], length L_g + L_d.
/// Additive: P^g + sum_i w_i P^d_i, requires L_g == L_d.
enum class QueryPrefixMode { Concat, Additive };

inline std::string to_string(Pooling p) { return p == Pooling::Mean ? "mean" : "first_token"; }
inline std::string to_string(Precision p) { return p == Precision::F64 ? "f64" : "f32"; }
inline std::string to_string(QueryPrefixMode m) {
  return m == QueryPrefixMode::Additive ? "additive" : "concat";
}

inline Pooling parse_pooling(const std::string& s) {
  if (s == "first_token") return Pooling::FirstToken;
  if (s == "mean") return Pooling::Mean;
  throw Error("unknown pooling '" + s + "'");
}
inline Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::F32;
  if (s == "f64") return Precision::F64;
  throw Error("unknown precision '" + s + "'");
}
inline QueryPrefixMode parse_query_prefix_mode(const std::string& s) {
  if (s == "concat") return QueryPrefixMode::Concat;
  if (s == "additive") return QueryPrefixMode::Additive;
  throw Error("unknown query prefix mode '" + s + "'");
}

/// Architecture hyperparameters. Every tensor shape in the model derives from here.
struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t model_dim = 32;
  std::size_t head_dim = 16;
  std::size_t ffn_dim = 64;
  std::size_t vocab_size = 512;
  std::size_t max_seq_len = 32;
  std::size_t general_prefix_len = 4;
  std::size_t domain_prefix_len = 4;
  std::size_t num_domains = 3;
  Pooling pooling = Pooling::FirstToken;
  Precision precision = Precision::F32;
  QueryPrefixMode query_prefix_mode = QueryPrefixMode::Concat;
  double init_std = 0.02;
  /// Nominal backbone size used for the trainable fraction; 0 means use the exact count.
  std::uint64_t reference_backbone_params = 0;

  std::size_t query_prefix_len() const {
    return query_prefix_mode == QueryPrefixMode::Concat ? general_prefix_len + domain_prefix_len
                                                        : general_prefix_len;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v < 1) throw Error(std::string("model config: ") + name + " must be >= 1");
    };
    positive(num_layers, "num_layers");
    positive(num_heads, "num_heads");
    positive(model_dim, "model_dim");
    positive(head_dim, "head_dim");
    positive(ffn_dim, "ffn_dim");
    positive(vocab_size, "vocab_size");
    positive(max_seq_len, "max_seq_len");
    positive(num_domains, "num_domains");
    if (model_dim != num_heads * head_dim) {
      throw Error("model config: model_dim (" + std::to_string(model_dim) +
                  ") must equal num_heads * head_dim (" + std::to_string(num_heads * head_dim) +
                  ")");
    }
    if (query_prefix_mode == QueryPrefixMode::Additive &&
        general_prefix_len != domain_prefix_len) {
      throw Error("model config: additive query prefix requires general_prefix_len == "
                  "domain_prefix_len");
    }
    if (!(init_std > 0.0)) throw Error("model config: init_std must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Small profile that trains in minutes on one CPU core.
inline ModelConfig desk_profile() { return ModelConfig{}; }

/// BERT-base / coCondenser-shaped dimensions with a 128-slot prefix and 8 modules.
/// Only used for parameter bookkeeping.
inline ModelConfig paper_shape_profile() {
  ModelConfig c;
  c.num_layers = 12;
  c.num_heads = 12;
  c.model_dim = 768;
  c.head_dim = 64;
  c.ffn_dim = 3072;
  c.vocab_size = 30522;
  c.max_seq_len = 512;
  c.general_prefix_len = 128;
  c.domain_prefix_len = 128;
  c.num_domains = 8;
  c.reference_backbone_params = 110'000'000;
  return c;
}

}  // namespace ddr
