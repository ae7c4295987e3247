#pragma once

#include <vector>

#include "ddr/config.hpp"
#include "ddr/random.hpp"
#include "ddr/tensor.hpp"

namespace ddr {

/// Key and value prefixes for one attention layer, each [heads x length x head_dim].
template <typename T>
struct PrefixPair {
  Tensor<T> key;
  Tensor<T> value;

  std::size_t length() const { return key.rank() == 3 ? key.dim(1) : 0; }

  static PrefixPair zeros(std::size_t heads, std::size_t length, std::size_t head_dim) {
    return {Tensor<T>({heads, length, head_dim}), Tensor<T>({heads, length, head_dim})};
  }

  friend bool operator==(const PrefixPair&, const PrefixPair&) = default;
};

/// The general prefix P^g and the N domain prefixes P^d_i, one pair per layer.
/// These are the only trainable encoder parameters once the backbone is frozen.
template <typename T>
struct PrefixBank {
  std::vector<PrefixPair<T>> general;               // [layer]
  std::vector<std::vector<PrefixPair<T>>> domains;  // [domain][layer]

  static PrefixBank zeros(const ModelConfig& c) {
    PrefixBank bank;
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      bank.general.push_back(
          PrefixPair<T>::zeros(c.num_heads, c.general_prefix_len, c.head_dim));
    }
    bank.domains.resize(c.num_domains);
    for (auto& layers : bank.domains) {
      for (std::size_t l = 0; l < c.num_layers; ++l) {
        layers.push_back(PrefixPair<T>::zeros(c.num_heads, c.domain_prefix_len, c.head_dim));
      }
    }
    return bank;
  }

  static PrefixBank random(const ModelConfig& c, Rng& rng, double stddev) {
    PrefixBank bank = zeros(c);
    bank.for_each([&](Tensor<T>& t) { rng.fill_normal(t, stddev); });
    return bank;
  }

  template <typename Fn>
  void for_each_general(Fn&& fn) {
    for (auto& p : general) {
      fn(p.key);
      fn(p.value);
    }
  }

  template <typename Fn>
  void for_each_domain(Fn&& fn) {
    for (auto& layers : domains) {
      for (auto& p : layers) {
        fn(p.key);
        fn(p.value);
      }
    }
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for_each_general(fn);
    for_each_domain(fn);
  }

  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& p : general) {
      fn(p.key);
      fn(p.value);
    }
    for (const auto& layers : domains) {
      for (const auto& p : layers) {
        fn(p.key);
        fn(p.value);
      }
    }
  }

  void validate(const ModelConfig& c) const {
    const Shape g{c.num_heads, c.general_prefix_len, c.head_dim};
    const Shape d{c.num_heads, c.domain_prefix_len, c.head_dim};
    if (general.size() != c.num_layers) throw ShapeError("prefix bank: wrong general layer count");
    for (const auto& p : general) {
      require_shape(p.key, g, "general prefix key");
      require_shape(p.value, g, "general prefix value");
      require_finite(p.key, "general prefix key");
      require_finite(p.value, "general prefix value");
    }
    if (domains.size() != c.num_domains) throw ShapeError("prefix bank: wrong domain count");
    for (const auto& layers : domains) {
      if (layers.size() != c.num_layers) throw ShapeError("prefix bank: wrong domain layer count");
      for (const auto& p : layers) {
        require_shape(p.key, d, "domain prefix key");
        require_shape(p.value, d, "domain prefix value");
        require_finite(p.key, "domain prefix key");
        require_finite(p.value, "domain prefix value");
      }
    }
  }

  friend bool operator==(const PrefixBank&, const PrefixBank&) = default;
};

}  // namespace ddr
