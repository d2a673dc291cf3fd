#pragma once

// Numeric identity checks runnable from the CLI on tiny environments.

#include <cmath>
#include <vector>

#include <json.hpp>

#include "epgfn/eval.hpp"
#include "epgfn/losses.hpp"
#include "epgfn/policy.hpp"

namespace epgfn::checks {

inline EnvConfig tiny_grid(int size) {
  EnvConfig c;
  c.kind = EnvKind::grid;
  c.grid.size = size;
  c.grid.beacons = {{size - 1, 0}};
  return c;
}

inline EnvConfig tiny_multiset(int dict, int target, Rng& rng) {
  EnvConfig c;
  c.kind = EnvKind::multiset;
  c.multiset.dict_size = dict;
  c.multiset.target_size = target;
  for (int u = 0; u < dict; ++u) c.multiset.values.push_back(uniform01(rng));
  return c;
}

inline ForwardPolicy random_tabular(const Environment& env, const StateSpace& space, double scale, Rng& rng) {
  Head h = Head::tabular(env.action_count());
  std::vector<double> row(env.action_count());
  for (const auto& s : space.states) {
    for (double& v : row) v = scale * (2.0 * uniform01(rng) - 1.0);
    h.set_row(s, row);
  }
  return ForwardPolicy(std::move(h));
}

/// max |DP p_T(x) - Σ_{τ⇝x} p_F(τ)|.
inline double dp_vs_paths(const ForwardPolicy& policy, const Environment& env) {
  const StateSpace space = enumerate_states(env);
  const auto dp = exact_pT(policy, env, space);
  StateMap<double> paths;
  for (const auto& t : enumerate_trajectories(env)) paths[t.terminal()] += std::exp(path_log_pf(policy_fn(policy, env), t));
  double dev = 0.0;
  for (const auto& [x, p] : dp.prob) dev = std::max(dev, std::abs(p - paths[x]));
  return dev;
}

/// max |L_CB(τ,τ') - (V_TB(τ) - V_TB(τ'))²| over random pairs and log Z.
inline double cb_tb_identity(const ForwardPolicy& policy, const Environment& env, std::size_t pairs, Rng& rng) {
  double dev = 0.0;
  for (std::size_t i = 0; i < pairs; ++i) {
    auto a = sample_trajectory(policy, env, 0.3, rng);
    auto b = sample_trajectory(policy, env, 0.3, rng);
    a.log_reward = env.log_reward(a.terminal());
    b.log_reward = env.log_reward(b.terminal());
    const double log_z = 10.0 * (2.0 * uniform01(rng) - 1.0);
    const double d = tb_violation(a, log_z) - tb_violation(b, log_z);
    dev = std::max(dev, std::abs(cb_loss(a, b) - d * d));
  }
  return dev;
}

/// |mean over all ordered pairs of L_CB - 2 L_VL| for one batch.
inline double cb_vl_identity(const ForwardPolicy& policy, const Environment& env, std::size_t batch, Rng& rng) {
  std::vector<Trajectory> ts;
  for (std::size_t i = 0; i < batch; ++i) {
    ts.push_back(sample_trajectory(policy, env, 0.3, rng));
    ts.back().log_reward = env.log_reward(ts.back().terminal());
  }
  double pairs = 0.0;
  for (const auto& a : ts)
    for (const auto& b : ts) pairs += cb_loss(a, b);
  pairs /= static_cast<double>(batch * batch);
  return std::abs(pairs - 2.0 * vl_batch(ts).loss);
}

inline nlohmann::ordered_json run_all(std::uint64_t seed) {
  nlohmann::ordered_json out;
  Rng rng(seed);
  const EnvPtr grid3 = make_environment(tiny_grid(3));
  const EnvPtr grid2 = make_environment(tiny_grid(2));
  const EnvPtr ms = make_environment(tiny_multiset(3, 3, rng));
  const StateSpace g3 = enumerate_states(*grid3), g2 = enumerate_states(*grid2), m3 = enumerate_states(*ms);
  const auto pg3 = random_tabular(*grid3, g3, 1.0, rng);
  const auto pm3 = random_tabular(*ms, m3, 1.0, rng);
  const auto pg2 = random_tabular(*grid2, g2, 1.0, rng);

  out["dp_vs_paths_grid3"] = dp_vs_paths(pg3, *grid3);
  out["dp_vs_paths_multiset3"] = dp_vs_paths(pm3, *ms);
  out["cb_tb_identity"] = cb_tb_identity(pg3, *grid3, 100, rng);
  out["cb_vl_identity"] = cb_vl_identity(pg3, *grid3, 16, rng);
  out["cb_kl_gradient_grid2"] = cb_kl_gradient_identity_check(pg2, *grid2);

  std::size_t violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<EnvPtr> clients;
    std::vector<ForwardPolicy> pols;
    for (int n = 0; n < 2; ++n) clients.push_back(make_environment(tiny_multiset(3, 2, rng)));
    const StateSpace sp = enumerate_states(*clients[0]);
    for (int n = 0; n < 2; ++n) pols.push_back(random_tabular(*clients[0], sp, 0.5, rng));
    const auto rep = robustness_bound_check({&pols[0], &pols[1]}, clients, *clients[0]);
    if (!rep.holds) ++violations;
  }
  out["jeffrey_bound_violations"] = violations;
  return out;
}

}  // namespace epgfn::checks
