#pragma once

// Checkpoint layout (all integers and scalars little-endian):
//   "DDRCKPT\0" | u32 version | config | backbone | prefix bank | router
// Tensors are written as u8 rank, u64 dims, then scalars in row-major order.
// Loading checks every tensor shape against the embedded config.

#include <string>
#include <type_traits>
#include <vector>

#include "ddr/config.hpp"
#include "ddr/model.hpp"
#include "ddr/serialize.hpp"

namespace ddr {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline const std::string kCheckpointMagic{"DDRCKPT\0", 8};

inline void write_config(ByteWriter& w, const ModelConfig& c) {
  for (std::size_t v : {c.num_layers, c.num_heads, c.model_dim, c.head_dim, c.ffn_dim,
                        c.vocab_size, c.max_seq_len, c.general_prefix_len, c.domain_prefix_len,
                        c.num_domains}) {
    w.u64(v);
  }
  w.u8(static_cast<std::uint8_t>(c.pooling));
  w.u8(static_cast<std::uint8_t>(c.precision));
  w.u8(static_cast<std::uint8_t>(c.query_prefix_mode));
  w.f64(c.init_std);
  w.u64(c.reference_backbone_params);
}

inline ModelConfig read_config(ByteReader& r) {
  ModelConfig c;
  for (std::size_t* v : {&c.num_layers, &c.num_heads, &c.model_dim, &c.head_dim, &c.ffn_dim,
                         &c.vocab_size, &c.max_seq_len, &c.general_prefix_len,
                         &c.domain_prefix_len, &c.num_domains}) {
    *v = r.u64();
  }
  const auto pooling = r.u8(), precision = r.u8(), mode = r.u8();
  if (pooling > 1 || precision > 1 || mode > 1) throw FormatError("checkpoint: bad enum value");
  c.pooling = static_cast<Pooling>(pooling);
  c.precision = static_cast<Precision>(precision);
  c.query_prefix_mode = static_cast<QueryPrefixMode>(mode);
  c.init_std = r.f64();
  c.reference_backbone_params = r.u64();
  c.validate();
  return c;
}

template <typename T>
void write_backbone(ByteWriter& w, const Backbone<T>& b) {
  w.u8(b.frozen ? 1 : 0);
  b.for_each([&](const Tensor<T>& t) { w.tensor(t); });
}

/// Backbone bytes alone; stable across runs and platforms.
template <typename T>
std::vector<std::uint8_t> serialize_backbone(const Backbone<T>& b) {
  ByteWriter w;
  write_backbone(w, b);
  return w.take();
}

template <typename T>
std::vector<std::uint8_t> serialize_prefixes(const PrefixBank<T>& bank) {
  ByteWriter w;
  bank.for_each([&](const Tensor<T>& t) { w.tensor(t); });
  return w.take();
}

/// Hash of everything the passage encoder reads: backbone plus P^g.
template <typename T>
std::string passage_encoder_fingerprint(const Model<T>& m) {
  ByteWriter w;
  write_backbone(w, m.backbone);
  for (const auto& pair : m.prefixes.general) {
    w.tensor(pair.key);
    w.tensor(pair.value);
  }
  return hex64(fnv1a64(w.bytes().data(), w.bytes().size()));
}

template <typename T>
std::vector<std::uint8_t> serialize_model(const Model<T>& m) {
  if ((m.config.precision == Precision::F32) != std::is_same_v<T, float>) {
    throw Error("serialize_model: scalar type does not match config precision");
  }
  ByteWriter w;
  w.raw(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u32(kCheckpointVersion);
  write_config(w, m.config);
  write_backbone(w, m.backbone);
  m.prefixes.for_each([&](const Tensor<T>& t) { w.tensor(t); });
  w.tensor(m.router.weights);
  w.u8(static_cast<std::uint8_t>(m.router.strategy.kind));
  w.u64(m.router.strategy.k);
  w.u8(m.router.strategy.renormalize ? 1 : 0);
  return w.take();
}

/// Reads only the header; lets callers pick the scalar type before a full load.
inline ModelConfig peek_checkpoint_config(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect_bytes(kCheckpointMagic);
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
  }
  return read_config(r);
}

template <typename T>
Model<T> deserialize_model(std::vector<std::uint8_t> bytes) {
  ByteReader r(std::move(bytes));
  r.expect_bytes(kCheckpointMagic);
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
  }
  Model<T> m;
  m.config = read_config(r);
  if ((m.config.precision == Precision::F32) != std::is_same_v<T, float>) {
    throw FormatError("checkpoint: stored precision " + to_string(m.config.precision) +
                      " does not match the requested scalar type");
  }
  m.backbone = Backbone<T>::zeros(m.config);
  m.backbone.frozen = r.u8() != 0;
  m.backbone.for_each([&](Tensor<T>& t) { t = r.tensor<T>(t.shape(), "backbone tensor"); });
  m.prefixes = PrefixBank<T>::zeros(m.config);
  m.prefixes.for_each([&](Tensor<T>& t) { t = r.tensor<T>(t.shape(), "prefix tensor"); });
  m.router = Router<T>::zeros(m.config);
  m.router.weights = r.tensor<T>(m.router.weights.shape(), "router weights");
  const auto kind = r.u8();
  if (kind > static_cast<std::uint8_t>(RoutingStrategy::Kind::AllSoft)) {
    throw FormatError("checkpoint: bad routing strategy");
  }
  m.router.strategy.kind = static_cast<RoutingStrategy::Kind>(kind);
  m.router.strategy.k = r.u64();
  m.router.strategy.renormalize = r.u8() != 0;
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes");
  m.validate();
  return m;
}

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& m) {
  write_file(path, serialize_model(m));
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
  return deserialize_model<T>(read_file(path));
}

}  // namespace ddr
