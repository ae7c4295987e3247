#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "helpers.hpp"

using namespace ddr;
using ddr::testing::random_model;
using ddr::testing::random_tensor;
using ddr::testing::small_config;

namespace {

std::set<std::size_t> support(const Selection<double>& s) {
  std::set<std::size_t> out;
  for (std::size_t i = 0; i < s.weights.size(); ++i)
    if (s.weights[i] != 0.0) out.insert(i);
  return out;
}

std::vector<std::size_t> random_mapping(Rng& rng, std::size_t n) {
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  rng.shuffle(all);
  all.resize(1 + rng.index(n));
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

TEST(Routing, PropertiesOverRandomInstances) {
  Rng rng(41);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.index(8), d = 1 + rng.index(16);
    auto x = random_tensor<double>(rng, {d}, 2.0);
    auto w = random_tensor<double>(rng, {n, d}, 2.0);
    const auto beta = route_distribution<double>(x.span(), w);
    double total = 0;
    for (double b : beta.span()) {
      EXPECT_GT(b, 0.0);
      total += b;
    }
    EXPECT_NEAR(total, 1.0, 1e-9);

    for (std::size_t k = 1; k <= n; ++k) {
      auto sel = select_active(beta, RoutingStrategy::top_k(k));
      const auto s = support(sel);
      EXPECT_EQ(s.size(), std::min(k, n));
      // Every kept entry is at least as large as every dropped one.
      for (std::size_t i : s) {
        for (std::size_t j = 0; j < n; ++j) {
          if (!s.count(j)) {
            EXPECT_GE(beta[i], beta[j]);
          }
        }
      }
      for (std::size_t i : s) EXPECT_EQ(sel.weights[i], beta[i]);
    }

    const auto mapped = random_mapping(rng, n);
    auto prior = select_active(beta, RoutingStrategy::prior(), &mapped);
    EXPECT_EQ(support(prior), std::set<std::size_t>(mapped.begin(), mapped.end()));
    for (std::size_t i : mapped) EXPECT_EQ(prior.weights[i], beta[i]);

    auto uniform = select_active(beta, RoutingStrategy::uniform_prior(), &mapped);
    EXPECT_EQ(support(uniform), std::set<std::size_t>(mapped.begin(), mapped.end()));
    for (std::size_t i : mapped) EXPECT_DOUBLE_EQ(uniform.weights[i], 1.0 / mapped.size());

    for (const auto& s : {RoutingStrategy::soft(), RoutingStrategy::all_soft()}) {
      auto sel = select_active(beta, s, &mapped);
      for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(sel.weights[i], beta[i]);
    }
  }
}

TEST(Routing, TopKTieGoesToLowerIndex) {
  auto beta = Tensor<double>::vector({0.5, 0.25, 0.25});
  auto sel = select_active(beta, RoutingStrategy::top_k(2));
  EXPECT_EQ(support(sel), (std::set<std::size_t>{0, 1}));
  // No renormalization: the weights stay 0.5 and 0.25.
  EXPECT_EQ(sel.weights[0], 0.5);
  EXPECT_EQ(sel.weights[1], 0.25);
  EXPECT_EQ(sel.weights[2], 0.0);

  auto all_tied = Tensor<double>::vector({0.25, 0.25, 0.25, 0.25});
  EXPECT_EQ(support(select_active(all_tied, RoutingStrategy::top_k(1))), (std::set<std::size_t>{0}));
}

TEST(Routing, SciFactLikeTaskKeepsItsTwoDomains) {
  DomainMap map({"science", "qa", "fact-checking", "code"});
  map.add_task("scifact", {"science", "fact-checking"});
  auto beta = Tensor<double>::vector({0.1, 0.4, 0.3, 0.2});
  auto sel = select_active(beta, RoutingStrategy::prior(), &map.lookup("scifact"));
  EXPECT_EQ(support(sel), (std::set<std::size_t>{0, 2}));
  EXPECT_EQ(sel.weights[0], 0.1);
  EXPECT_EQ(sel.weights[2], 0.3);
}

TEST(Routing, RenormalizeOptionSumsToOne) {
  auto beta = Tensor<double>::vector({0.5, 0.3, 0.2});
  auto s = RoutingStrategy::top_k(2);
  s.renormalize = true;
  auto sel = select_active(beta, s);
  EXPECT_NEAR(sel.weights[0], 0.625, 1e-15);
  EXPECT_NEAR(sel.weights[1], 0.375, 1e-15);
  EXPECT_EQ(sel.weights[2], 0.0);
}

TEST(Routing, SelectBackwardMatchesCentralDifference) {
  Rng rng(42);
  std::vector<std::size_t> mapped{0, 2};
  std::vector<RoutingStrategy> strategies{RoutingStrategy::soft(), RoutingStrategy::top_k(2),
                                          RoutingStrategy::prior(), RoutingStrategy::all_soft()};
  auto renorm = RoutingStrategy::top_k(2);
  renorm.renormalize = true;
  strategies.push_back(renorm);
  auto renorm_prior = RoutingStrategy::prior();
  renorm_prior.renormalize = true;
  strategies.push_back(renorm_prior);
  for (const auto& s : strategies) {
    auto beta = softmax(random_tensor<double>(rng, {4}));
    auto up = random_tensor<double>(rng, {4});
    const auto sel = select_active(beta, s, &mapped);
    std::function<double(const Tensor<double>&)> f = [&](const Tensor<double>& b) {
      // Selection held fixed, as in the backward pass.
      auto again = select_active(b, s, &mapped);
      EXPECT_EQ(again.active, sel.active);
      return dot<double>(again.weights.span(), up.span());
    };
    auto num = central_difference_grad(f, beta, 1e-6);
    auto ana = select_active_backward(beta, sel, s, up);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(ana[i], num[i], 1e-8) << s.name();
  }
  auto beta = softmax(random_tensor<double>(rng, {4}));
  auto sel = select_active(beta, RoutingStrategy::uniform_prior(), &mapped);
  auto zero = select_active_backward(beta, sel, RoutingStrategy::uniform_prior(), random_tensor<double>(rng, {4}));
  for (double v : zero.span()) EXPECT_EQ(v, 0.0);
}

TEST(ComposePrefix, ConcatLayoutAndAverage) {
  ModelConfig c = small_config();
  auto m = random_model<double>(c, 43);
  const std::vector<double> w{0.5, 0.5, 0.0};
  auto p = compose_prefix<double>(w, m.prefixes, 1, c);
  ASSERT_EQ(p.length(), c.general_prefix_len + c.domain_prefix_len);
  const auto& g = m.prefixes.general[1];
  const auto& a = m.prefixes.domains[0][1];
  const auto& b = m.prefixes.domains[1][1];
  for (std::size_t h = 0; h < c.num_heads; ++h)
    for (std::size_t e = 0; e < c.head_dim; ++e) {
      for (std::size_t s = 0; s < c.general_prefix_len; ++s) {
        EXPECT_EQ(p.key(h, s, e), g.key(h, s, e));
        EXPECT_EQ(p.value(h, s, e), g.value(h, s, e));
      }
      for (std::size_t s = 0; s < c.domain_prefix_len; ++s) {
        const std::size_t o = c.general_prefix_len + s;
        EXPECT_NEAR(p.key(h, o, e), (a.key(h, s, e) + b.key(h, s, e)) / 2, 1e-15);
        EXPECT_NEAR(p.value(h, o, e), (a.value(h, s, e) + b.value(h, s, e)) / 2, 1e-15);
      }
    }
}

TEST(ComposePrefix, LinearInWeights) {
  ModelConfig c = small_config();
  auto m = random_model<double>(c, 44);
  Rng rng(45);
  for (int t = 0; t < 20; ++t) {
    auto w1 = random_tensor<double>(rng, {3});
    auto w2 = random_tensor<double>(rng, {3});
    const double alpha = rng.normal(), gamma = rng.normal();
    Tensor<double> mix({3});
    for (std::size_t i = 0; i < 3; ++i) mix[i] = alpha * w1[i] + gamma * w2[i];
    auto p1 = compose_prefix<double>(w1.span(), m.prefixes, 0, c);
    auto p2 = compose_prefix<double>(w2.span(), m.prefixes, 0, c);
    auto pm = compose_prefix<double>(mix.span(), m.prefixes, 0, c);
    for (std::size_t h = 0; h < c.num_heads; ++h)
      for (std::size_t s = c.general_prefix_len; s < p1.length(); ++s)
        for (std::size_t e = 0; e < c.head_dim; ++e) {
          EXPECT_NEAR(pm.key(h, s, e), alpha * p1.key(h, s, e) + gamma * p2.key(h, s, e), 1e-12);
          EXPECT_NEAR(pm.value(h, s, e), alpha * p1.value(h, s, e) + gamma * p2.value(h, s, e), 1e-12);
        }
  }
}

TEST(ComposePrefix, AdditiveMode) {
  ModelConfig c = small_config();
  c.query_prefix_mode = QueryPrefixMode::Additive;
  auto m = random_model<double>(c, 46);
  const std::vector<double> w{0.2, 0.0, 0.8};
  auto p = compose_prefix<double>(w, m.prefixes, 0, c);
  ASSERT_EQ(p.length(), c.general_prefix_len);
  const double want = m.prefixes.general[0].key(1, 2, 3) + 0.2 * m.prefixes.domains[0][0].key(1, 2, 3) +
                      0.8 * m.prefixes.domains[2][0].key(1, 2, 3);
  EXPECT_NEAR(p.key(1, 2, 3), want, 1e-14);

  ModelConfig bad = c;
  bad.domain_prefix_len = c.general_prefix_len + 1;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(ComposePrefix, BackwardMatchesCentralDifference) {
  ModelConfig c = small_config();
  auto m = random_model<double>(c, 47);
  Rng rng(48);
  auto w = random_tensor<double>(rng, {3});
  auto up = PrefixPair<double>::zeros(c.num_heads, c.query_prefix_len(), c.head_dim);
  rng.fill_normal(up.key, 1.0);
  rng.fill_normal(up.value, 1.0);
  auto grads = PrefixBank<double>::zeros(c);
  auto dw = compose_prefix_backward<double>(w.span(), m.prefixes, 1, c, up, grads);
  std::function<double(const Tensor<double>&)> f = [&](const Tensor<double>& ww) {
    auto p = compose_prefix<double>(ww.span(), m.prefixes, 1, c);
    return dot<double>(p.key.span(), up.key.span()) + dot<double>(p.value.span(), up.value.span());
  };
  auto num = central_difference_grad(f, w, 1e-6);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(dw[i], num[i], 1e-7);
  // d/dP^d_i is w_i times the upstream slice.
  EXPECT_NEAR(grads.domains[2][1].value(0, 1, 2), w[2] * up.value(0, c.general_prefix_len + 1, 2), 1e-15);
  EXPECT_EQ(grads.general[1].key(1, 0, 0), up.key(1, 0, 0));
  EXPECT_EQ(grads.domains[0][0].key(0, 0, 0), 0.0);
}

TEST(Routing, GradientCheckAcrossStrategies) {
  auto renorm = RoutingStrategy::top_k(2);
  renorm.renormalize = true;
  for (const auto& s : {RoutingStrategy::soft(), RoutingStrategy::top_k(1), RoutingStrategy::top_k(2),
                        RoutingStrategy::prior(), RoutingStrategy::uniform_prior(), RoutingStrategy::all_soft(),
                        renorm}) {
    const auto r = run_grad_check(desk_profile(), s, 2);
    EXPECT_LE(r.max_rel_error, 1e-4) << s.name() << " at " << r.worst_tensor;
    EXPECT_GT(r.coordinates, 0u);
  }
}

TEST(RoutingStrategy, ParseAndName) {
  for (const std::string s : {"soft", "topk:1", "topk:2", "prior", "uniform_prior", "all_soft"}) {
    EXPECT_EQ(RoutingStrategy::parse(s).name(), s);
  }
  EXPECT_THROW(RoutingStrategy::parse("topk:"), Error);
  EXPECT_THROW(RoutingStrategy::parse("topk:x"), Error);
  EXPECT_THROW(RoutingStrategy::parse("hard"), Error);
  EXPECT_THROW(RoutingStrategy::top_k(0).validate(3), Error);
  EXPECT_THROW(RoutingStrategy::top_k(4).validate(3), Error);
  EXPECT_NO_THROW(RoutingStrategy::top_k(3).validate(3));
  EXPECT_TRUE(RoutingStrategy::prior().needs_task_domains());
  EXPECT_FALSE(RoutingStrategy::uniform_prior().uses_router());
  EXPECT_FALSE(RoutingStrategy::all_soft().needs_task_domains());
}

TEST(DomainMap, Validation) {
  EXPECT_THROW(DomainMap({"a", "a"}), Error);
  DomainMap map({"a", "b"});
  map.add_task("t", {"b", "a", "b"});
  EXPECT_EQ(map.lookup("t"), (std::vector<std::size_t>{0, 1}));
  EXPECT_THROW(map.add_task("t", {"a"}), Error);
  EXPECT_THROW(map.add_task("u", {"c"}), Error);
  EXPECT_THROW(map.add_task("v", {}), Error);
  EXPECT_THROW(map.lookup("missing"), Error);
  EXPECT_THROW(map.validate(3), Error);
}

TEST(Routing, PriorWithoutMappingThrows) {
  auto beta = Tensor<double>::vector({0.5, 0.5});
  EXPECT_THROW(select_active(beta, RoutingStrategy::prior()), Error);
  std::vector<std::size_t> out_of_range{2};
  EXPECT_THROW(select_active(beta, RoutingStrategy::prior(), &out_of_range), Error);
}
