#pragma once

#include <filesystem>
#include <string>

#include "ddr/ddr.hpp"

namespace ddr::testing {

/// Desk shapes with a small vocabulary and short sequences.
inline ModelConfig small_config() {
  ModelConfig c = desk_profile();
  c.vocab_size = 40;
  c.max_seq_len = 12;
  return c;
}

inline TokenIds random_tokens(Rng& rng, std::size_t len, std::size_t vocab) {
  TokenIds t;
  for (std::size_t i = 0; i < len; ++i) t.push_back(static_cast<std::int32_t>(rng.index(vocab)));
  return t;
}

/// Initialized model with a non-zero router, so routing is not uniform.
template <typename T>
Model<T> random_model(const ModelConfig& c, std::uint64_t seed,
                      RoutingStrategy strategy = RoutingStrategy::soft()) {
  Model<T> m = Model<T>::initialize(c, seed, strategy);
  Rng rng(Rng::mix(seed, 500));
  rng.fill_normal(m.router.weights, 1.0);
  m.prefixes.for_each([&](Tensor<T>& t) { rng.fill_normal(t, 0.5); });
  return m;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ddr_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  rng.fill_normal(t, stddev);
  return t;
}

}  // namespace ddr::testing
