#pragma once

// Server side: AB aggregation of frozen client snapshots, single-round
// parameter averaging, and the factorized-categorical (PCVI) baseline.

#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "epgfn/common.hpp"
#include "epgfn/env.hpp"
#include "epgfn/eval.hpp"
#include "epgfn/policy.hpp"
#include "epgfn/train.hpp"

namespace epgfn {

struct AggregationJob {
  std::vector<PolicySnapshot> snapshots;
  std::vector<double> weights;  // empty means all ones
  TrainConfig config;           // loss.kind is forced to AB

  void validate(const Environment& env) const {
    if (snapshots.empty()) throw Error(Errc::no_snapshots, "aggregation needs at least one snapshot");
    if (!weights.empty() && weights.size() != snapshots.size())
      throw Error(Errc::dimension_mismatch, "one weight per snapshot required");
    for (double w : weights)
      if (!(w > 0)) throw Error(Errc::invalid_config, "aggregation weights must be > 0");
    for (const auto& s : snapshots)
      if (s.env_fingerprint != env.fingerprint())
        throw Error(Errc::fingerprint_mismatch, "snapshot for " + s.env_fingerprint + ", environment is " + env.fingerprint());
  }
};

/// log p_F^n(τ) - log p_B(τ|x) for every snapshot n.
inline std::vector<double> local_log_ratios(const std::vector<PolicySnapshot>& snaps, const Environment& env, const Trajectory& t) {
  std::vector<double> out(snaps.size());
  std::vector<double> steps;
  const double lpb = t.sum_log_pb();
  for (std::size_t n = 0; n < snaps.size(); ++n) {
    step_log_pf(snaps[n].policy, env, t, steps);
    double s = 0.0;
    for (double v : steps) s += v;
    out[n] = s - lpb;
  }
  return out;
}

/// Trains a fresh global policy by minimizing the AB loss on pairs drawn from
/// the ε-mixture of the global policy. Never evaluates a reward.
inline TrainResult aggregate_ab(EnvPtr env, const AggregationJob& job, const Evaluator& eval = {}) {
  job.validate(*env);
  TrainConfig cfg = job.config;
  cfg.loss.kind = LossKind::ab;
  cfg.loss.weights = job.weights.empty() ? std::vector<double>(job.snapshots.size(), 1.0) : job.weights;
  cfg.validate();
  Rng rng(cfg.seed);
  Rng eval_rng(derive_seed(cfg.seed, 0xe7a1));
  Learner learner(env, cfg, rng);
  std::vector<TrajectoryTrace> traces;
  std::vector<std::vector<double>> ratios;
  TrainResult res;
  std::size_t run = 0;
  res.metrics = detail::run_epochs(
      cfg, eval, learner.policy, eval_rng,
      [&](std::size_t e) {
        learner.set_lr_scale(cfg.lr_scale(e));
        auto batch = learner.sample_batch(rng, traces, cfg.epsilon);
        ratios.resize(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) ratios[i] = local_log_ratios(job.snapshots, *env, batch[i]);
        return learner.step(batch, &traces, &ratios);
      },
      res.epochs_to_stop, run);
  res.snapshot = make_snapshot(*env, learner.policy, cfg, run);
  res.snapshot.meta["role"] = "global";
  res.snapshot.meta["clients"] = std::to_string(job.snapshots.size());
  return res;
}

/// Elementwise parameter mean. Tabular rows are aligned by state; a row
/// missing from a snapshot counts as zero logits.
inline PolicySnapshot fedavg_average(const std::vector<PolicySnapshot>& snaps) {
  if (snaps.empty()) throw Error(Errc::no_snapshots, "nothing to average");
  const Head& h0 = snaps[0].policy.head();
  for (const auto& s : snaps) {
    if (s.policy.head().backend() != h0.backend() || s.policy.head().output() != h0.output() ||
        (h0.backend() == Backend::mlp && !(s.policy.head().spec() == h0.spec())))
      throw Error(Errc::architecture_mismatch, "snapshots do not share an architecture");
    if (s.env_fingerprint != snaps[0].env_fingerprint) throw Error(Errc::fingerprint_mismatch, "snapshots target different environments");
  }
  const double n = static_cast<double>(snaps.size());
  PolicySnapshot out;
  out.env_fingerprint = snaps[0].env_fingerprint;
  out.meta["role"] = "fedavg";
  out.meta["clients"] = std::to_string(snaps.size());
  if (h0.backend() == Backend::mlp) {
    std::vector<double> p(h0.params().size(), 0.0);
    for (const auto& s : snaps)
      for (std::size_t i = 0; i < p.size(); ++i) p[i] += s.policy.head().params()[i] / n;
    out.policy = ForwardPolicy(Head::mlp_from(h0.spec(), std::move(p)));
    return out;
  }
  const std::size_t width = h0.output();
  std::map<StateKey, std::vector<double>> rows;
  for (const auto& s : snaps) {
    const Head& h = s.policy.head();
    for (std::size_t r = 0; r < h.keys().size(); ++r) {
      auto& row = rows.try_emplace(h.keys()[r], width, 0.0).first->second;
      for (std::size_t a = 0; a < width; ++a) row[a] += h.params()[r * width + a] / n;
    }
  }
  std::vector<StateKey> keys;
  std::vector<double> params;
  for (auto& [k, row] : rows) {
    keys.push_back(k);
    params.insert(params.end(), row.begin(), row.end());
  }
  out.policy = ForwardPolicy(Head::tabular_from(width, std::move(keys), std::move(params)));
  return out;
}

// ---------------------------------------------------------------- PCVI

/// Named simplex blocks of a factorized categorical family.
struct PcviParams {
  EnvKind kind = EnvKind::grid;
  std::map<std::string, std::vector<double>> blocks;
};

inline constexpr double kPcviSmoothing = 1.0;

namespace detail {

inline void require_pcvi_env(const Environment& env) {
  if (env.kind() == EnvKind::phylo) throw Error(Errc::unsupported_env, "factorized categoricals do not cover tree topologies");
}

inline std::string token_block(std::size_t len, std::size_t pos) {
  return "tok." + std::to_string(len) + "." + std::to_string(pos);
}

inline void normalize_block(std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  for (double& x : v) x /= s;
}

}  // namespace detail

/// Smoothed empirical frequencies of `samples` (terminal states of `env`).
inline PcviParams pcvi_fit_samples(const std::vector<StateKey>& samples, const Environment& env) {
  detail::require_pcvi_env(env);
  PcviParams p;
  p.kind = env.kind();
  const EnvConfig& c = env.config();
  auto smoothed = [](std::size_t n) { return std::vector<double>(n, kPcviSmoothing); };
  switch (env.kind()) {
    case EnvKind::grid: {
      auto x = smoothed(static_cast<std::size_t>(c.grid.size)), y = x;
      for (const auto& s : samples) {
        x[static_cast<std::size_t>(s[0])] += 1.0;
        y[static_cast<std::size_t>(s[1])] += 1.0;
      }
      p.blocks["x"] = x;
      p.blocks["y"] = y;
      break;
    }
    case EnvKind::multiset: {
      auto items = smoothed(static_cast<std::size_t>(c.multiset.dict_size));
      for (const auto& s : samples)
        for (std::size_t u = 0; u < s.size(); ++u) items[u] += s[u];
      p.blocks["items"] = items;
      break;
    }
    case EnvKind::sequence: {
      const auto S = static_cast<std::size_t>(c.sequence.max_len);
      const auto U = static_cast<std::size_t>(c.sequence.num_tokens);
      p.blocks["length"] = smoothed(S + 1);
      for (std::size_t len = 1; len <= S; ++len)
        for (std::size_t i = 0; i < len; ++i) p.blocks[detail::token_block(len, i)] = smoothed(U);
      for (const auto& s : samples) {
        p.blocks["length"][s.size()] += 1.0;
        for (std::size_t i = 0; i < s.size(); ++i) p.blocks[detail::token_block(s.size(), i)][static_cast<std::size_t>(s[i])] += 1.0;
      }
      break;
    }
    case EnvKind::phylo: break;
  }
  for (auto& [name, v] : p.blocks) detail::normalize_block(v);
  return p;
}

inline PcviParams pcvi_fit(const PolicySnapshot& snap, const Environment& env, std::size_t samples, Rng& rng) {
  detail::require_pcvi_env(env);
  return pcvi_fit_samples(sample_terminals(snap.policy, env, samples, rng), env);
}

/// Per-block elementwise product, renormalized.
inline PcviParams pcvi_pool(const std::vector<PcviParams>& parts) {
  if (parts.empty()) throw Error(Errc::no_snapshots, "nothing to pool");
  PcviParams out = parts[0];
  for (std::size_t n = 1; n < parts.size(); ++n) {
    if (parts[n].kind != out.kind || parts[n].blocks.size() != out.blocks.size())
      throw Error(Errc::shape_mismatch, "PCVI parameter families differ");
    for (auto& [name, v] : out.blocks) {
      auto it = parts[n].blocks.find(name);
      if (it == parts[n].blocks.end() || it->second.size() != v.size()) throw Error(Errc::shape_mismatch, "PCVI block " + name + " differs");
      for (std::size_t i = 0; i < v.size(); ++i) v[i] *= it->second[i];
    }
  }
  for (auto& [name, v] : out.blocks) detail::normalize_block(v);
  return out;
}

/// The terminal distribution implied by `p`.
inline DistributionTable pcvi_distribution(const PcviParams& p, const Environment& env, const StateSpace& space) {
  detail::require_pcvi_env(env);
  if (p.kind != env.kind()) throw Error(Errc::shape_mismatch, "PCVI family does not match the environment");
  DistributionTable out;
  out.provenance = "pcvi";
  for (std::size_t i : space.terminals) {
    const StateKey& x = space.states[i];
    double lp = 0.0;
    switch (p.kind) {
      case EnvKind::grid:
        lp = std::log(p.blocks.at("x")[static_cast<std::size_t>(x[0])]) + std::log(p.blocks.at("y")[static_cast<std::size_t>(x[1])]);
        break;
      case EnvKind::multiset: {
        const auto& phi = p.blocks.at("items");
        int total = 0;
        for (std::size_t u = 0; u < x.size(); ++u) {
          lp += x[u] * std::log(phi[u]) - std::lgamma(x[u] + 1.0);
          total += x[u];
        }
        lp += std::lgamma(total + 1.0);
        break;
      }
      case EnvKind::sequence:
        lp = std::log(p.blocks.at("length")[x.size()]);
        for (std::size_t k = 0; k < x.size(); ++k) lp += std::log(p.blocks.at(detail::token_block(x.size(), k))[static_cast<std::size_t>(x[k])]);
        break;
      case EnvKind::phylo: break;
    }
    out.prob[x] = std::exp(lp);
  }
  return out;
}

inline std::string pcvi_to_text(const PcviParams& p) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "kind = " << env_kind_name(p.kind) << '\n';
  for (const auto& [name, v] : p.blocks) {
    os << name << " =";
    for (double x : v) os << ' ' << x;
    os << '\n';
  }
  return os.str();
}

inline PcviParams pcvi_from_text(const std::string& text) {
  PcviParams p;
  std::istringstream is(text);
  std::string line;
  bool have_kind = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find(" =");
    if (eq == std::string::npos) throw Error(Errc::truncated_payload, "malformed PCVI line");
    const std::string name = line.substr(0, eq);
    std::istringstream vs(line.substr(eq + 2));
    if (name == "kind") {
      std::string k;
      vs >> k;
      p.kind = parse_env_kind(k);
      have_kind = true;
      continue;
    }
    std::vector<double> v;
    double x;
    while (vs >> x) v.push_back(x);
    p.blocks[name] = v;
  }
  if (!have_kind) throw Error(Errc::truncated_payload, "PCVI text missing kind");
  return p;
}

}  // namespace epgfn
