#pragma once

// Small environments shared by the unit tests.

#include <vector>

#include "epgfn/env.hpp"
#include "epgfn/eval.hpp"

namespace testenv {

using namespace epgfn;

inline EnvPtr grid(int n, std::vector<std::pair<int, int>> beacons = {}) {
  EnvConfig c;
  c.kind = EnvKind::grid;
  c.grid.size = n;
  c.grid.beacons = beacons.empty() ? std::vector<std::pair<int, int>>{{n - 1, 0}} : std::move(beacons);
  return make_environment(c);
}

inline EnvPtr multiset(int u, int s, double scale = 0.5, double shift = 0.0) {
  EnvConfig c;
  c.kind = EnvKind::multiset;
  c.multiset.dict_size = u;
  c.multiset.target_size = s;
  for (int i = 0; i < u; ++i) c.multiset.values.push_back(scale * ((i * 7 + 3) % u) / u + shift);
  return make_environment(c);
}

inline EnvPtr sequence(int len, int tokens) {
  EnvConfig c;
  c.kind = EnvKind::sequence;
  c.sequence.max_len = len;
  c.sequence.num_tokens = tokens;
  for (int i = 0; i < len; ++i) c.sequence.position_scores.push_back(0.3 * (i + 1));
  for (int i = 0; i < tokens; ++i) c.sequence.token_scores.push_back(0.5 - 0.4 * i);
  return make_environment(c);
}

inline EnvPtr phylo(int leaves, int sites, std::uint64_t seed = 1) {
  EnvConfig c;
  c.kind = EnvKind::phylo;
  c.phylo.leaves = leaves;
  Rng rng(seed);
  c.phylo.data = simulate_sites(c.phylo, random_topology(leaves, rng), sites, rng);
  return make_environment(c);
}

inline ForwardPolicy balanced(const Environment& env) {
  const StateSpace space = enumerate_states(env);
  return balanced_policy(env, space, [&](const StateKey& x) { return env.log_reward(x); });
}

inline ForwardPolicy random_tabular(const Environment& env, Rng& rng, double scale = 1.0) {
  ForwardPolicy p(Head::tabular(env.action_count()));
  std::vector<double> row(env.action_count());
  for (const auto& s : enumerate_states(env).states) {
    for (auto& v : row) v = scale * (2 * uniform01(rng) - 1);
    p.head().set_row(s, row);
  }
  return p;
}

}  // namespace testenv
