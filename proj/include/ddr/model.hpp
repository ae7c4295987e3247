#pragma once

#include <cstdint>
#include <vector>

#include "ddr/config.hpp"
#include "ddr/prefix_bank.hpp"
#include "ddr/random.hpp"
#include "ddr/routing.hpp"
#include "ddr/tensor.hpp"

namespace ddr {

/// One post-norm transformer layer: attention, residual, norm, FFN, residual, norm.
template <typename T>
struct LayerWeights {
  Tensor<T> wq, wk, wv, wo;  // [d x d]
  Tensor<T> w1, b1;          // [d x ffn], [ffn]
  Tensor<T> w2, b2;          // [ffn x d], [d]
  Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias;

  static LayerWeights zeros(const ModelConfig& c) {
    const std::size_t d = c.model_dim, f = c.ffn_dim;
    return {Tensor<T>({d, d}), Tensor<T>({d, d}), Tensor<T>({d, d}), Tensor<T>({d, d}),
            Tensor<T>({d, f}), Tensor<T>({f}),    Tensor<T>({f, d}), Tensor<T>({d}),
            Tensor<T>({d}),    Tensor<T>({d}),    Tensor<T>({d}),    Tensor<T>({d})};
  }

  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    fn(self.wq);
    fn(self.wk);
    fn(self.wv);
    fn(self.wo);
    fn(self.w1);
    fn(self.b1);
    fn(self.w2);
    fn(self.b2);
    fn(self.ln1_gain);
    fn(self.ln1_bias);
    fn(self.ln2_gain);
    fn(self.ln2_bias);
  }

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

/// Transformer encoder weights. Once `frozen` is set no training phase may touch them.
template <typename T>
struct Backbone {
  Tensor<T> token_embedding;     // [vocab x d]
  Tensor<T> position_embedding;  // [max_seq_len x d]
  std::vector<LayerWeights<T>> layers;
  bool frozen = false;

  static Backbone zeros(const ModelConfig& c) {
    Backbone b;
    b.token_embedding = Tensor<T>({c.vocab_size, c.model_dim});
    b.position_embedding = Tensor<T>({c.max_seq_len, c.model_dim});
    for (std::size_t l = 0; l < c.num_layers; ++l) b.layers.push_back(LayerWeights<T>::zeros(c));
    return b;
  }

  /// Gaussian weights (std = init_std), unit norm gains, zero biases.
  static Backbone random(const ModelConfig& c, Rng& rng) {
    Backbone b = zeros(c);
    rng.fill_normal(b.token_embedding, c.init_std);
    rng.fill_normal(b.position_embedding, c.init_std);
    for (auto& layer : b.layers) {
      for (Tensor<T>* w : {&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.w1, &layer.w2}) {
        rng.fill_normal(*w, c.init_std);
      }
      layer.ln1_gain.fill(T{1});
      layer.ln2_gain.fill(T{1});
    }
    return b;
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    fn(token_embedding);
    fn(position_embedding);
    for (auto& layer : layers) LayerWeights<T>::visit(layer, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    fn(token_embedding);
    fn(position_embedding);
    for (const auto& layer : layers) LayerWeights<T>::visit(layer, fn);
  }

  void validate(const ModelConfig& c) const {
    const Backbone expected = zeros(c);
    if (layers.size() != c.num_layers) throw ShapeError("backbone: wrong layer count");
    std::vector<Shape> want;
    expected.for_each([&](const Tensor<T>& t) { want.push_back(t.shape()); });
    std::size_t i = 0;
    for_each([&](const Tensor<T>& t) {
      require_shape(t, want[i++], "backbone tensor");
      require_finite(t, "backbone tensor");
    });
  }

  friend bool operator==(const Backbone&, const Backbone&) = default;
};

/// Everything needed to encode queries and passages.
template <typename T>
struct Model {
  ModelConfig config;
  Backbone<T> backbone;
  PrefixBank<T> prefixes;
  Router<T> router;

  /// Seeded initialization: Gaussian backbone and prefixes, zero router.
  static Model initialize(const ModelConfig& c, std::uint64_t seed,
                          RoutingStrategy strategy = RoutingStrategy::soft()) {
    c.validate();
    Rng backbone_rng(Rng::mix(seed, 1));
    Rng prefix_rng(Rng::mix(seed, 2));
    Model m{c, Backbone<T>::random(c, backbone_rng), PrefixBank<T>::random(c, prefix_rng, c.init_std),
            Router<T>::zeros(c, strategy)};
    return m;
  }

  void validate() const {
    config.validate();
    backbone.validate(config);
    prefixes.validate(config);
    router.validate(config);
  }
};

/// Closed-form parameter counts for a configuration.
struct ParameterReport {
  std::uint64_t backbone_total = 0;
  std::uint64_t general_prefix = 0;
  std::uint64_t per_domain_prefix = 0;
  std::uint64_t num_domains = 0;
  std::uint64_t router = 0;
  std::uint64_t trainable_total = 0;
  /// Backbone size the fraction is measured against (nominal when configured).
  std::uint64_t reference_backbone = 0;
  /// per_domain_prefix / reference_backbone.
  double trainable_fraction = 0.0;
};

inline ParameterReport count_parameters(const ModelConfig& c) {
  c.validate();
  const std::uint64_t L = c.num_layers, H = c.num_heads, d = c.model_dim, dh = c.head_dim;
  const std::uint64_t f = c.ffn_dim;
  ParameterReport r;
  const std::uint64_t per_layer = 4 * d * d + d * f + f + f * d + d + 4 * d;
  r.backbone_total = c.vocab_size * d + c.max_seq_len * d + L * per_layer;
  r.general_prefix = L * 2 * H * c.general_prefix_len * dh;
  r.per_domain_prefix = L * 2 * H * c.domain_prefix_len * dh;
  r.num_domains = c.num_domains;
  r.router = c.num_domains * d;
  r.trainable_total = r.general_prefix + r.num_domains * r.per_domain_prefix + r.router;
  r.reference_backbone =
      c.reference_backbone_params ? c.reference_backbone_params : r.backbone_total;
  r.trainable_fraction =
      static_cast<double>(r.per_domain_prefix) / static_cast<double>(r.reference_backbone);
  return r;
}

}  // namespace ddr
