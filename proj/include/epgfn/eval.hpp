#pragma once

// Exact and sampled terminal distributions, divergences, reward targets and
// the numeric oracles for the aggregation theory.

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "epgfn/common.hpp"
#include "epgfn/env.hpp"
#include "epgfn/losses.hpp"
#include "epgfn/policy.hpp"

namespace epgfn {

struct DistributionTable {
  StateMap<double> prob;
  std::string provenance;

  double at(const StateKey& x) const {
    auto it = prob.find(x);
    return it == prob.end() ? 0.0 : it->second;
  }
  double total() const {
    double s = 0.0;
    for (const auto& [k, p] : prob) s += p;
    return s;
  }
  /// Entries sorted by key, for deterministic output.
  std::vector<std::pair<StateKey, double>> sorted() const {
    std::vector<std::pair<StateKey, double>> out(prob.begin(), prob.end());
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
  }
};

/// Action probabilities of a state; lets non-parametric policies (e.g. the
/// naive product) share the evaluators.
using ProbFn = std::function<void(const StateKey&, ActionDist&)>;

inline ProbFn policy_fn(const ForwardPolicy& policy, const Environment& env) {
  return [&policy, &env](const StateKey& s, ActionDist& d) { policy.distribution(env, s, d); };
}

/// Pushes unit mass from s0 through the DAG in topological order.
inline DistributionTable exact_pT(const ProbFn& probs, const Environment& env, const StateSpace& space) {
  std::vector<double> mass(space.states.size(), 0.0);
  mass[0] = 1.0;
  DistributionTable out;
  out.provenance = "exact-dp";
  ActionDist d;
  for (std::size_t i = 0; i < space.states.size(); ++i) {
    if (mass[i] == 0.0) {
      if (space.terminal[i]) out.prob[space.states[i]] = 0.0;
      continue;
    }
    probs(space.states[i], d);
    for (ActionId a : d.legal) {
      const double m = mass[i] * d.prob[a];
      if (a == env.stop_action()) {
        out.prob[space.states[i]] += m;
      } else {
        mass[space.index.at(env.apply(space.states[i], a))] += m;
      }
    }
    if (space.terminal[i]) out.prob.try_emplace(space.states[i], 0.0);
  }
  return out;
}

inline DistributionTable exact_pT(const ForwardPolicy& policy, const Environment& env, const StateSpace& space) {
  return exact_pT(policy_fn(policy, env), env, space);
}

inline DistributionTable exact_pT(const ForwardPolicy& policy, const Environment& env, double guard = kDefaultStateGuard) {
  return exact_pT(policy, env, enumerate_states(env, guard));
}

/// On-policy (epsilon = 0) terminal draws.
inline std::vector<StateKey> sample_terminals(const ForwardPolicy& policy, const Environment& env, std::size_t n, Rng& rng) {
  std::vector<StateKey> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_trajectory(policy, env, 0.0, rng).terminal());
  return out;
}

inline DistributionTable empirical_table(const std::vector<StateKey>& samples) {
  DistributionTable out;
  out.provenance = "sampled(" + std::to_string(samples.size()) + ")";
  const double w = 1.0 / static_cast<double>(samples.size());
  for (const auto& x : samples) out.prob[x] += w;
  return out;
}

inline DistributionTable sampled_pT(const ForwardPolicy& policy, const Environment& env, std::size_t n, Rng& rng) {
  if (n == 0) throw Error(Errc::invalid_config, "sample count must be >= 1");
  return empirical_table(sample_terminals(policy, env, n, rng));
}

using LogRewardFn = std::function<double(const StateKey&)>;

/// Mean log-reward of the K highest-scoring samples, multiplicity counted.
inline double topk_avg_log_reward(const std::vector<StateKey>& samples, const LogRewardFn& log_reward, std::size_t k) {
  if (k == 0 || samples.size() < k) throw Error(Errc::invalid_config, "Top-K needs n >= K >= 1");
  std::vector<double> r;
  r.reserve(samples.size());
  StateMap<double> memo;
  for (const auto& x : samples) {
    auto [it, fresh] = memo.try_emplace(x, 0.0);
    if (fresh) it->second = log_reward(x);
    r.push_back(it->second);
  }
  std::partial_sort(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(k), r.end(), std::greater<>());
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) s += r[i];
  return s / static_cast<double>(k);
}

/// Top-K mean for a table, treating n·p(x) as the expected sample count of x.
inline double topk_avg_log_reward(const DistributionTable& table, const LogRewardFn& log_reward, std::size_t n, std::size_t k) {
  if (k == 0 || n < k) throw Error(Errc::invalid_config, "Top-K needs n >= K >= 1");
  std::vector<std::pair<double, double>> entries;  // (log R, expected count)
  for (const auto& [x, p] : table.prob)
    if (p > 0) entries.emplace_back(log_reward(x), p * static_cast<double>(n));
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  double need = static_cast<double>(k), s = 0.0;
  for (const auto& [r, c] : entries) {
    const double take = std::min(c, need);
    s += take * r;
    need -= take;
    if (need <= 0) break;
  }
  return s / (static_cast<double>(k) - std::max(0.0, need));
}

inline double l1(const DistributionTable& p, const DistributionTable& q) {
  double s = 0.0;
  for (const auto& [x, px] : p.prob) s += std::abs(px - q.at(x));
  for (const auto& [x, qx] : q.prob)
    if (!p.prob.contains(x)) s += std::abs(qx);
  return s;
}

/// KL(p || q); +inf when q misses mass that p has.
inline double kl(const DistributionTable& p, const DistributionTable& q) {
  double s = 0.0;
  for (const auto& [x, px] : p.prob) {
    if (px <= 0) continue;
    const double qx = q.at(x);
    if (qx <= 0) {
      std::cerr << "warning: KL support violation at " << x.to_string() << '\n';
      return std::numeric_limits<double>::infinity();
    }
    s += px * (std::log(px) - std::log(qx));
  }
  return s;
}

inline double jeffrey(const DistributionTable& p, const DistributionTable& q) { return kl(p, q) + kl(q, p); }

inline DistributionTable normalize_log_table(const StateMap<double>& log_w, std::string provenance) {
  double m = kNegInf;
  for (const auto& [x, w] : log_w) m = std::max(m, w);
  if (m == kNegInf) throw Error(Errc::reward_support, "all-zero target");
  double z = 0.0;
  for (const auto& [x, w] : log_w) z += std::exp(w - m);
  DistributionTable out;
  out.provenance = std::move(provenance);
  for (const auto& [x, w] : log_w) out.prob[x] = std::exp(w - m) / z;
  return out;
}

/// Σ_n ω_n log R_n(x); ω empty means all ones.
inline double pooled_log_reward(const std::vector<EnvPtr>& clients, std::span<const double> weights, const StateKey& x) {
  double s = 0.0;
  for (std::size_t n = 0; n < clients.size(); ++n) s += (weights.empty() ? 1.0 : weights[n]) * clients[n]->log_reward(x);
  return s;
}

/// Normalized Π_n R_n(x)^{ω_n} over the enumerated terminals.
inline DistributionTable reward_table(const std::vector<EnvPtr>& clients, std::span<const double> weights, const StateSpace& space) {
  if (clients.empty()) throw Error(Errc::no_snapshots, "reward table needs at least one reward");
  if (!weights.empty() && weights.size() != clients.size()) throw Error(Errc::dimension_mismatch, "weights / clients mismatch");
  StateMap<double> log_w;
  for (std::size_t i : space.terminals) log_w[space.states[i]] = pooled_log_reward(clients, weights, space.states[i]);
  return normalize_log_table(log_w, "reward-normalized");
}

inline DistributionTable reward_table(const Environment& env, const StateSpace& space) {
  StateMap<double> log_w;
  for (std::size_t i : space.terminals) log_w[space.states[i]] = env.log_reward(space.states[i]);
  return normalize_log_table(log_w, "reward-normalized");
}

// ---------------------------------------------------------------- trajectory enumeration

inline constexpr double kDefaultTrajectoryGuard = 1e6;

/// Every complete trajectory of `env` (log_pf left empty, log_pb filled).
inline std::vector<Trajectory> enumerate_trajectories(const Environment& env, double guard = kDefaultTrajectoryGuard) {
  std::vector<Trajectory> out;
  Trajectory cur;
  std::vector<ActionId> legal;
  std::function<void(const StateKey&, double)> dfs = [&](const StateKey& s, double lpb) {
    cur.states.push_back(s);
    cur.log_pb.push_back(lpb);
    std::vector<ActionId> acts;
    env.legal_actions(s, acts);
    for (ActionId a : acts) {
      cur.actions.push_back(a);
      if (a == env.stop_action()) {
        if (static_cast<double>(out.size()) >= guard) throw Error(Errc::guard_exceeded, "trajectory enumeration guard exceeded");
        out.push_back(cur);
      } else {
        const StateKey next = env.apply(s, a);
        dfs(next, BackwardPolicy::log_prob(env, next));
      }
      cur.actions.pop_back();
    }
    cur.states.pop_back();
    cur.log_pb.pop_back();
  };
  dfs(env.initial_state(), 0.0);
  return out;
}

inline double path_log_pf(const ProbFn& probs, const Trajectory& t) {
  ActionDist d;
  double s = 0.0;
  for (std::size_t k = 0; k < t.states.size(); ++k) {
    probs(t.states[k], d);
    s += d.logp[t.actions[k]];
  }
  return s;
}

/// π̂(x) ∝ Σ_{τ⇝x} p_B(τ|x) Π_n (p_F^n(τ) / p_B(τ|x))^{ω_n}.
inline DistributionTable effective_target(const std::vector<const ForwardPolicy*>& locals, const Environment& env,
                                          std::span<const double> weights = {},
                                          double guard = kDefaultTrajectoryGuard) {
  if (locals.empty()) throw Error(Errc::no_snapshots, "effective target needs at least one snapshot");
  const auto trajs = enumerate_trajectories(env, guard);
  StateMap<std::vector<double>> terms;
  for (const auto& t : trajs) {
    const double lpb = t.sum_log_pb();
    double v = lpb;
    for (std::size_t n = 0; n < locals.size(); ++n)
      v += (weights.empty() ? 1.0 : weights[n]) * (path_log_pf(policy_fn(*locals[n], env), t) - lpb);
    terms[t.terminal()].push_back(v);
  }
  StateMap<double> log_w;
  for (auto& [x, v] : terms) log_w[x] = log_sum_exp(v);
  return normalize_log_table(log_w, "effective-target");
}

struct BoundReport {
  std::vector<double> alpha, beta;
  double jeffrey = 0.0;
  double bound = 0.0;
  bool holds = true;
};

/// Ratio extrema of p_F^n(τ) / (p_B(τ|x) π_n(x)) and the resulting Jeffrey
/// bound between the pooled target and the effective target.
inline BoundReport robustness_bound_check(const std::vector<const ForwardPolicy*>& locals, const std::vector<EnvPtr>& clients,
                                          const Environment& env, double guard = kDefaultTrajectoryGuard) {
  if (locals.size() != clients.size() || locals.empty()) throw Error(Errc::dimension_mismatch, "one reward per snapshot required");
  const auto trajs = enumerate_trajectories(env, guard);
  const StateSpace space = enumerate_states(env);
  BoundReport rep;
  for (std::size_t n = 0; n < locals.size(); ++n) {
    const DistributionTable pi = reward_table(*clients[n], space);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    const ProbFn probs = policy_fn(*locals[n], env);
    for (const auto& t : trajs) {
      const double r = path_log_pf(probs, t) - t.sum_log_pb() - std::log(pi.at(t.terminal()));
      lo = std::min(lo, r);
      hi = std::max(hi, r);
    }
    rep.alpha.push_back(1.0 - std::exp(lo));
    rep.beta.push_back(std::exp(hi) - 1.0);
    rep.bound += hi - lo;  // log((1+β)/(1-α))
  }
  const DistributionTable target = reward_table(clients, {}, space);
  rep.jeffrey = jeffrey(target, effective_target(locals, env, {}, guard));
  rep.holds = rep.jeffrey <= rep.bound + 1e-9 * std::max(1.0, rep.bound);
  return rep;
}

// ---------------------------------------------------------------- constructed policies

/// Tabular policy whose terminal marginal is exactly ∝ exp(log_reward), built
/// from state flows F(s) = R(s)[s terminal] + Σ_{s'} F(s') p_B(s|s').
inline ForwardPolicy balanced_policy(const Environment& env, const StateSpace& space, const LogRewardFn& log_reward) {
  std::vector<double> log_flow(space.states.size(), kNegInf);
  std::vector<ActionId> legal;
  for (std::size_t i = space.states.size(); i-- > 0;) {
    const StateKey& s = space.states[i];
    double f = space.terminal[i] ? log_reward(s) : kNegInf;
    env.legal_actions(s, legal);
    for (ActionId a : legal) {
      if (a == env.stop_action()) continue;
      const StateKey next = env.apply(s, a);
      f = log_add_exp(f, log_flow[space.index.at(next)] + BackwardPolicy::log_prob(env, next));
    }
    log_flow[i] = f;
  }
  Head head = Head::tabular(env.action_count());
  std::vector<double> row(env.action_count());
  for (std::size_t i = 0; i < space.states.size(); ++i) {
    const StateKey& s = space.states[i];
    std::fill(row.begin(), row.end(), 0.0);
    env.legal_actions(s, legal);
    for (ActionId a : legal) {
      if (a == env.stop_action()) {
        row[a] = log_reward(s) - log_flow[i];
      } else {
        const StateKey next = env.apply(s, a);
        row[a] = log_flow[space.index.at(next)] + BackwardPolicy::log_prob(env, next) - log_flow[i];
      }
    }
    head.set_row(s, row);
  }
  return ForwardPolicy(std::move(head));
}

/// Per-state product of local action distributions, renormalized.
inline ProbFn naive_product(const std::vector<const ForwardPolicy*>& locals, const Environment& env) {
  return [locals, &env](const StateKey& s, ActionDist& d) {
    std::vector<double> logits(env.action_count(), 0.0);
    ActionDist ld;
    for (const auto* p : locals) {
      p->distribution(env, s, ld);
      for (ActionId a : ld.legal) logits[a] += ld.logp[a];
    }
    masked_softmax(logits, ld.legal, d);
    d.legal = ld.legal;
  };
}

// ---------------------------------------------------------------- gradient identity

/// max |∇KL(P_F || P_B) - ¼ E_{τ,τ'~p_F}[∇L_CB(τ, τ')]| over the tabular logits.
inline double cb_kl_gradient_identity_check(const ForwardPolicy& policy_in, const Environment& env,
                                            double guard = kDefaultTrajectoryGuard) {
  if (policy_in.head().backend() != Backend::tabular) throw Error(Errc::unsupported_loss, "identity check needs a tabular policy");
  ForwardPolicy policy = policy_in;
  const StateSpace space = enumerate_states(env);
  for (const auto& s : space.states) policy.head().ensure_row(s);
  const std::size_t dim = policy.head().params().size();
  const std::size_t width = policy.head().output();
  auto trajs = enumerate_trajectories(env, guard);

  double log_z_r = kNegInf;
  for (std::size_t i : space.terminals) log_z_r = log_add_exp(log_z_r, env.log_reward(space.states[i]));

  const std::size_t T = trajs.size();
  std::vector<double> lpf(T), v(T);
  std::vector<std::vector<double>> g(T, std::vector<double>(dim, 0.0));  // ∇ log p_F(τ)
  ActionDist d;
  for (std::size_t t = 0; t < T; ++t) {
    auto& tr = trajs[t];
    tr.log_pf.clear();
    for (std::size_t k = 0; k < tr.states.size(); ++k) {
      policy.distribution(env, tr.states[k], d);
      tr.log_pf.push_back(d.logp[tr.actions[k]]);
      const std::size_t row = policy.head().find_row(tr.states[k]) * width;
      for (ActionId a : d.legal) g[t][row + a] -= d.prob[a];
      g[t][row + tr.actions[k]] += 1.0;
    }
    tr.log_reward = env.log_reward(tr.terminal());
    lpf[t] = tr.sum_log_pf();
    v[t] = log_ratio_minus_reward(tr);
  }

  std::vector<double> lhs(dim, 0.0), rhs(dim, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const double pf = std::exp(lpf[t]);
    const double log_pb_traj = trajs[t].log_reward + trajs[t].sum_log_pb() - log_z_r;
    const double c = pf * (lpf[t] - log_pb_traj + 1.0);
    for (std::size_t i = 0; i < dim; ++i) lhs[i] += c * g[t][i];
  }
  for (std::size_t a = 0; a < T; ++a) {
    for (std::size_t b = 0; b < T; ++b) {
      const double w = 0.25 * std::exp(lpf[a] + lpf[b]) * 2.0 * (v[a] - v[b]);
      if (w == 0.0) continue;
      for (std::size_t i = 0; i < dim; ++i) rhs[i] += w * (g[a][i] - g[b][i]);
    }
  }
  double dev = 0.0;
  for (std::size_t i = 0; i < dim; ++i) dev = std::max(dev, std::abs(lhs[i] - rhs[i]));
  return dev;
}

// ---------------------------------------------------------------- noisy rewards

/// Adds a frozen N(0, σ²) offset to every terminal log-reward.
class NoisyRewardEnv final : public Environment {
 public:
  NoisyRewardEnv(EnvPtr base, double sigma2, Rng& rng, double guard = kDefaultStateGuard) : base_(std::move(base)) {
    if (!(sigma2 >= 0)) throw Error(Errc::invalid_config, "noise variance must be >= 0");
    const StateSpace space = enumerate_states(*base_, guard);
    std::normal_distribution<double> normal(0.0, std::sqrt(sigma2));
    for (std::size_t i : space.terminals) offset_[space.states[i]] = sigma2 > 0 ? normal(rng) : 0.0;
  }

  const EnvConfig& config() const override { return base_->config(); }
  StateKey initial_state() const override { return base_->initial_state(); }
  std::size_t action_count() const override { return base_->action_count(); }
  void legal_actions(const StateKey& s, std::vector<ActionId>& out) const override { base_->legal_actions(s, out); }
  StateKey apply(const StateKey& s, ActionId a) const override { return base_->apply(s, a); }
  std::vector<ParentEdge> parent_edges(const StateKey& s) const override { return base_->parent_edges(s); }
  std::size_t parent_count(const StateKey& s) const override { return base_->parent_count(s); }
  bool is_terminal(const StateKey& s) const override { return base_->is_terminal(s); }
  void validate(const StateKey& s) const override { base_->validate(s); }
  double log_reward(const StateKey& x) const override { return base_->log_reward(x) + offset_.at(x); }
  std::size_t feature_size() const override { return base_->feature_size(); }
  std::vector<double> featurize(const StateKey& s) const override { return base_->featurize(s); }
  bool all_states_terminal() const override { return base_->all_states_terminal(); }
  std::size_t max_trajectory_length() const override { return base_->max_trajectory_length(); }
  double estimated_state_count() const override { return base_->estimated_state_count(); }

  double offset(const StateKey& x) const { return offset_.at(x); }

 private:
  EnvPtr base_;
  StateMap<double> offset_;
};

inline EnvPtr noisy_reward_wrap(EnvPtr env, double sigma2, Rng& rng, double guard = kDefaultStateGuard) {
  return std::make_shared<NoisyRewardEnv>(std::move(env), sigma2, rng, guard);
}

}  // namespace epgfn
