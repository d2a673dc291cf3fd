#include <gtest/gtest.h>

#include <cmath>

#include "epgfn/eval.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace epgfn;

namespace {

DistributionTable table(std::initializer_list<std::pair<StateKey, double>> entries) {
  DistributionTable t;
  for (const auto& [k, v] : entries) t.prob[k] = v;
  return t;
}

std::map<StateKey, double> as_map(const DistributionTable& t) {
  std::map<StateKey, double> m(t.prob.begin(), t.prob.end());
  return m;
}

}  // namespace

TEST(Metrics, KnownValues) {
  const auto p = table({{StateKey{0}, 0.5}, {StateKey{1}, 0.5}});
  const auto q = table({{StateKey{0}, 0.25}, {StateKey{1}, 0.75}});
  EXPECT_NEAR(l1(p, q), 0.5, 1e-15);
  const double kpq = 0.5 * std::log(2.0) + 0.5 * std::log(0.5 / 0.75);
  const double kqp = 0.25 * std::log(0.5) + 0.75 * std::log(1.5);
  EXPECT_NEAR(kl(p, q), kpq, 1e-15);
  EXPECT_NEAR(jeffrey(p, q), kpq + kqp, 1e-15);
  EXPECT_EQ(kl(p, p), 0.0);
}

TEST(Metrics, L1CountsMissingKeys) {
  const auto p = table({{StateKey{0}, 1.0}});
  const auto q = table({{StateKey{1}, 1.0}});
  EXPECT_EQ(l1(p, q), 2.0);
  EXPECT_EQ(l1(q, p), 2.0);
}

TEST(Metrics, KlInfiniteOnSupportViolation) {
  const auto p = table({{StateKey{0}, 0.5}, {StateKey{1}, 0.5}});
  const auto q = table({{StateKey{0}, 1.0}, {StateKey{1}, 0.0}});
  EXPECT_TRUE(std::isinf(kl(p, q)));
  EXPECT_NEAR(kl(q, p), std::log(2.0), 1e-15);
}

TEST(TopK, CountsMultiplicity) {
  const std::vector<StateKey> samples{{3}, {3}, {1}, {2}};
  const LogRewardFn r = [](const StateKey& x) { return static_cast<double>(x[0]); };
  EXPECT_DOUBLE_EQ(topk_avg_log_reward(samples, r, 2), 3.0);
  EXPECT_DOUBLE_EQ(topk_avg_log_reward(samples, r, 3), 8.0 / 3);
  EXPECT_THROW(topk_avg_log_reward(samples, r, 5), Error);
}

TEST(TopK, TableUsesExpectedCounts) {
  const auto t = table({{StateKey{3}, 0.1}, {StateKey{1}, 0.6}, {StateKey{2}, 0.3}});
  const LogRewardFn r = [](const StateKey& x) { return static_cast<double>(x[0]); };
  // n = 10: expected counts 1, 3, 6; top 4 = one 3 and three 2s
  EXPECT_NEAR(topk_avg_log_reward(t, r, 10, 4), (3.0 + 6.0) / 4, 1e-12);
  const auto point = table({{StateKey{2}, 1.0}});
  EXPECT_NEAR(topk_avg_log_reward(point, r, 100, 50), 2.0, 1e-15);
}

TEST(Targets, RewardTableIsNormalizedProduct) {
  const auto a = testenv::grid(4, {{0, 3}}), b = testenv::grid(4, {{3, 0}});
  const auto space = enumerate_states(*a);
  const std::vector<double> w{1.0, 0.5};
  const auto t = reward_table({a, b}, w, space);
  std::map<StateKey, double> want;
  double z = 0.0;
  for (std::size_t i : space.terminals) {
    const auto& x = space.states[i];
    z += (want[x] = std::exp(a->log_reward(x) + 0.5 * b->log_reward(x)));
  }
  for (auto& [x, v] : want) EXPECT_NEAR(t.at(x), v / z, 1e-15);
  EXPECT_THROW(reward_table({a, b}, std::vector<double>{1.0}, space), Error);
}

TEST(Targets, BalancedPolicyMatchesReward) {
  for (const auto& env : {testenv::grid(5), testenv::multiset(4, 3), testenv::sequence(3, 3), testenv::phylo(5, 20)}) {
    const auto pol = testenv::balanced(*env);
    const auto space = enumerate_states(*env);
    EXPECT_LT(l1(exact_pT(pol, *env, space), reward_table(*env, space)), 1e-12) << env_kind_name(env->kind());
  }
}

TEST(Targets, ExactPtMatchesPathSummation) {
  const auto env = testenv::sequence(3, 2);
  Rng rng(2);
  const auto pol = testenv::random_tabular(*env, rng);
  const auto brute = oracle::brute_pT(policy_fn(pol, *env), *env);
  EXPECT_LT(oracle::l1(as_map(exact_pT(pol, *env)), brute), 1e-14);
}

TEST(Targets, EffectiveTargetOfBalancedLocalsIsProduct) {
  const std::vector<EnvPtr> clients{testenv::multiset(3, 3, 0.5, 0.0), testenv::multiset(3, 3, -1.0, 0.3)};
  const auto env = clients[0];
  const auto l0 = testenv::balanced(*clients[0]), l1p = testenv::balanced(*clients[1]);
  const auto space = enumerate_states(*env);
  const auto eff = effective_target({&l0, &l1p}, *env);
  EXPECT_LT(l1(eff, reward_table(clients, {}, space)), 1e-12);
  const std::vector<double> w{0.5, 2.0};
  EXPECT_LT(l1(effective_target({&l0, &l1p}, *env, w), reward_table(clients, w, space)), 1e-12);
}

TEST(Targets, BoundIsTightForBalancedLocals) {
  const std::vector<EnvPtr> clients{testenv::grid(3, {{0, 2}}), testenv::grid(3, {{2, 2}})};
  const auto l0 = testenv::balanced(*clients[0]), l1p = testenv::balanced(*clients[1]);
  const auto rep = robustness_bound_check({&l0, &l1p}, clients, *clients[0]);
  EXPECT_TRUE(rep.holds);
  EXPECT_LT(rep.jeffrey, 1e-12);
  EXPECT_LT(rep.bound, 1e-12);
  ASSERT_EQ(rep.alpha.size(), 2u);
}

TEST(Targets, BoundHoldsForRandomLocals) {
  const std::vector<EnvPtr> clients{testenv::grid(3, {{0, 2}}), testenv::grid(3, {{2, 1}})};
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto l0 = testenv::random_tabular(*clients[0], rng, 0.5), l1p = testenv::random_tabular(*clients[1], rng, 0.5);
    const auto rep = robustness_bound_check({&l0, &l1p}, clients, *clients[0]);
    EXPECT_TRUE(rep.holds);
    EXPECT_GT(rep.jeffrey, 0.0);
    for (double a : rep.alpha) EXPECT_LT(a, 1.0);
  }
}

TEST(Targets, NaiveProductOfOneIsIdentity) {
  const auto env = testenv::multiset(3, 3);
  Rng rng(9);
  const auto pol = testenv::random_tabular(*env, rng);
  const auto space = enumerate_states(*env);
  EXPECT_LT(l1(exact_pT(naive_product({&pol}, *env), *env, space), exact_pT(pol, *env, space)), 1e-14);
}

TEST(Targets, CbKlGradientIdentity) {
  const auto env = testenv::grid(3);
  Rng rng(10);
  EXPECT_LT(cb_kl_gradient_identity_check(testenv::random_tabular(*env, rng), *env), 1e-10);
}

TEST(Enumeration, TrajectoryGuard) {
  const auto env = testenv::grid(5);
  EXPECT_EQ(enumerate_trajectories(*env).size(), oracle::all_paths(*env).size());
  try {
    enumerate_trajectories(*env, 10);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::guard_exceeded);
  }
}

TEST(Noise, ZeroVarianceIsIdentity) {
  const auto base = testenv::multiset(3, 3);
  Rng rng(1);
  const auto noisy = noisy_reward_wrap(base, 0.0, rng);
  const auto space = enumerate_states(*base);
  for (std::size_t i : space.terminals) {
    const auto& x = space.states[i];
    EXPECT_EQ(noisy->log_reward(x), base->log_reward(x));
  }
  EXPECT_EQ(noisy->fingerprint(), base->fingerprint());
}

TEST(Noise, OffsetsAreFrozenGaussian) {
  const auto base = testenv::multiset(6, 5);
  Rng rng(2);
  const auto noisy = noisy_reward_wrap(base, 4.0, rng);
  const auto& ne = dynamic_cast<const NoisyRewardEnv&>(*noisy);
  const auto space = enumerate_states(*base);
  double s = 0.0, s2 = 0.0;
  for (std::size_t i : space.terminals) {
    const auto& x = space.states[i];
    const double o = ne.offset(x);
    EXPECT_EQ(noisy->log_reward(x), noisy->log_reward(x));
    EXPECT_NEAR(noisy->log_reward(x) - base->log_reward(x), o, 1e-12);
    s += o;
    s2 += o * o;
  }
  const double n = static_cast<double>(space.terminals.size());  // 252
  EXPECT_NEAR(s / n, 0.0, 4 * 2.0 / std::sqrt(n));
  EXPECT_NEAR(s2 / n, 4.0, 1.2);
  EXPECT_THROW(noisy_reward_wrap(base, -1.0, rng), Error);
}

TEST(Noise, RespectsStateGuard) {
  const auto base = testenv::multiset(10, 8);
  Rng rng(1);
  try {
    noisy_reward_wrap(base, 1.0, rng, 100);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::enumeration_too_large);
  }
}
