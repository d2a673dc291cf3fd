#pragma once

// Balance criteria over trajectory batches. Each batch loss returns its value
// together with the partial derivatives wrt the log-probabilities it consumed;
// the trainer chains those through the policy and flow heads.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "epgfn/common.hpp"
#include "epgfn/policy.hpp"

namespace epgfn {

enum class LossKind { tb, db, dbc, cb, vl, ab };

inline const char* loss_name(LossKind k) {
  switch (k) {
    case LossKind::tb: return "tb";
    case LossKind::db: return "db";
    case LossKind::dbc: return "dbc";
    case LossKind::cb: return "cb";
    case LossKind::vl: return "vl";
    case LossKind::ab: return "ab";
  }
  return "?";
}

inline LossKind parse_loss(const std::string& s) {
  for (LossKind k : {LossKind::tb, LossKind::db, LossKind::dbc, LossKind::cb, LossKind::vl, LossKind::ab})
    if (s == loss_name(k)) return k;
  throw Error(Errc::unsupported_loss, "unknown loss kind '" + s + "'");
}

struct LossSpec {
  LossKind kind = LossKind::cb;
  double logz_lr = 0.1;
  std::vector<double> weights;  // AB pooling weights; empty means all ones

  void validate() const {
    if (!(logz_lr > 0)) throw Error(Errc::invalid_config, "loss.logz_lr must be > 0");
    for (double w : weights)
      if (!(w > 0) || !std::isfinite(w)) throw Error(Errc::invalid_config, "loss.weights must be > 0");
  }
};

/// d loss / d log p_F(action | states[step]) of trajectory `traj`.
struct StepCoef {
  std::size_t traj;
  std::size_t step;
  ActionId action;
  double coef;
};

struct LossGrad {
  std::vector<double> traj_coef;                // d loss / d Σ_k log p_F(a_k | s_k), per trajectory
  std::vector<StepCoef> steps;                  // extra per-step terms
  std::vector<std::vector<double>> dlog_flow;   // d loss / d log F(s_k), per trajectory and state
  double dlog_z = 0.0;
};

struct LossValue {
  double loss = 0.0;
  LossGrad grad;
};

namespace detail {

inline double checked_log_reward(const Trajectory& t) {
  if (std::isnan(t.log_reward)) throw Error(Errc::invalid_batch, "trajectory reward was not evaluated");
  if (!std::isfinite(t.log_reward)) throw Error(Errc::reward_support, "terminal " + t.terminal().to_string() + " has zero reward");
  return t.log_reward;
}

inline void require_pairs(std::size_t n) {
  if (n < 2 || n % 2) throw Error(Errc::invalid_batch, "pair losses need an even batch of size >= 2");
}

}  // namespace detail

/// log p_F(τ) - log p_B(τ|x) - log R(x); the TB violation without log Z.
inline double log_ratio_minus_reward(const Trajectory& t) {
  return t.sum_log_pf() - t.sum_log_pb() - detail::checked_log_reward(t);
}

/// Signed TB violation: log Z + log p_F(τ) - log p_B(τ|x) - log R(x).
inline double tb_violation(const Trajectory& t, double log_z) { return log_z + log_ratio_minus_reward(t); }

inline double tb_loss(const Trajectory& t, double log_z) {
  const double v = tb_violation(t, log_z);
  return v * v;
}

inline double cb_loss(const Trajectory& a, const Trajectory& b) {
  const double d = log_ratio_minus_reward(a) - log_ratio_minus_reward(b);
  return d * d;
}

/// Interior DB edge s -> s'.
inline double db_edge_loss(double log_pf, double log_pb, double log_flow_s, double log_flow_next) {
  const double v = log_pf - log_pb + log_flow_s - log_flow_next;
  return v * v;
}

/// Terminal DB edge x -> s_f.
inline double db_terminal_loss(double log_flow_x, double log_pf_stop, double log_reward) {
  if (!std::isfinite(log_reward)) throw Error(Errc::reward_support, "terminal edge with zero reward");
  const double v = log_flow_x + log_pf_stop - log_reward;
  return v * v;
}

/// Violation of R(s')p_B(s|s')p_F(stop|s) = R(s)p_F(s'|s)p_F(stop|s') in log form.
inline double dbc_violation(double log_r_s, double log_r_next, double log_pb, double log_pf_stop_s, double log_pf_edge,
                            double log_pf_stop_next) {
  return log_r_next + log_pb + log_pf_stop_s - log_r_s - log_pf_edge - log_pf_stop_next;
}

inline LossValue tb_batch(std::span<const Trajectory> batch, double log_z) {
  if (batch.empty()) throw Error(Errc::invalid_batch, "empty batch");
  LossValue out;
  const double n = static_cast<double>(batch.size());
  out.grad.traj_coef.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double v = tb_violation(batch[i], log_z);
    out.loss += v * v / n;
    out.grad.traj_coef[i] = 2.0 * v / n;
    out.grad.dlog_z += 2.0 * v / n;
  }
  return out;
}

/// Consecutive halves form the pairs: (i, i + B/2).
inline LossValue cb_batch(std::span<const Trajectory> batch) {
  detail::require_pairs(batch.size());
  LossValue out;
  const std::size_t half = batch.size() / 2;
  out.grad.traj_coef.assign(batch.size(), 0.0);
  for (std::size_t i = 0; i < half; ++i) {
    const double d = log_ratio_minus_reward(batch[i]) - log_ratio_minus_reward(batch[i + half]);
    out.loss += d * d / static_cast<double>(half);
    out.grad.traj_coef[i] += 2.0 * d / static_cast<double>(half);
    out.grad.traj_coef[i + half] -= 2.0 * d / static_cast<double>(half);
  }
  return out;
}

inline LossValue vl_batch(std::span<const Trajectory> batch) {
  if (batch.size() < 2) throw Error(Errc::invalid_batch, "variance loss needs a batch of size >= 2");
  const double n = static_cast<double>(batch.size());
  std::vector<double> v(batch.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) mean += (v[i] = log_ratio_minus_reward(batch[i])) / n;
  LossValue out;
  out.grad.traj_coef.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.loss += (v[i] - mean) * (v[i] - mean) / n;
    out.grad.traj_coef[i] = 2.0 * (v[i] - mean) / n;
  }
  return out;
}

/// `log_flow[i][k]` = log F(states[k]) of trajectory i. Mean over all edges,
/// terminal edge included.
inline LossValue db_batch(std::span<const Trajectory> batch, const std::vector<std::vector<double>>& log_flow) {
  if (batch.empty()) throw Error(Errc::invalid_batch, "empty batch");
  if (log_flow.size() != batch.size()) throw Error(Errc::dimension_mismatch, "flow table size mismatch");
  std::size_t edges = 0;
  for (const auto& t : batch) edges += t.length();
  const double n = static_cast<double>(edges);
  LossValue out;
  out.grad.traj_coef.assign(batch.size(), 0.0);
  out.grad.dlog_flow.resize(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Trajectory& t = batch[i];
    const auto& f = log_flow[i];
    auto& df = out.grad.dlog_flow[i];
    df.assign(t.states.size(), 0.0);
    const std::size_t last = t.states.size() - 1;
    for (std::size_t k = 0; k < last; ++k) {
      const double v = t.log_pf[k] - t.log_pb[k + 1] + f[k] - f[k + 1];
      out.loss += v * v / n;
      out.grad.steps.push_back({i, k, t.actions[k], 2.0 * v / n});
      df[k] += 2.0 * v / n;
      df[k + 1] -= 2.0 * v / n;
    }
    const double lr = detail::checked_log_reward(t);
    const double v = f[last] + t.log_pf[last] - lr;
    out.loss += v * v / n;
    out.grad.steps.push_back({i, last, t.actions[last], 2.0 * v / n});
    df[last] += 2.0 * v / n;
  }
  return out;
}

/// `stop_logp[i][k]` = log p_F(stop | states[k]); `state_log_reward[i][k]` =
/// log R(states[k]). Mean over the non-stop edges of the batch.
inline LossValue dbc_batch(std::span<const Trajectory> batch, const std::vector<std::vector<double>>& stop_logp,
                           const std::vector<std::vector<double>>& state_log_reward, ActionId stop) {
  if (batch.empty()) throw Error(Errc::invalid_batch, "empty batch");
  std::size_t edges = 0;
  for (const auto& t : batch) edges += t.length() - 1;
  LossValue out;
  out.grad.traj_coef.assign(batch.size(), 0.0);
  if (edges == 0) return out;
  const double n = static_cast<double>(edges);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Trajectory& t = batch[i];
    for (std::size_t k = 0; k + 1 < t.states.size(); ++k) {
      const double rs = state_log_reward[i][k], rn = state_log_reward[i][k + 1];
      if (!std::isfinite(rs) || !std::isfinite(rn)) throw Error(Errc::reward_support, "zero reward on a DBC edge");
      const double v = dbc_violation(rs, rn, t.log_pb[k + 1], stop_logp[i][k], t.log_pf[k], stop_logp[i][k + 1]);
      out.loss += v * v / n;
      out.grad.steps.push_back({i, k, stop, 2.0 * v / n});
      out.grad.steps.push_back({i, k, t.actions[k], -2.0 * v / n});
      out.grad.steps.push_back({i, k + 1, stop, -2.0 * v / n});
    }
  }
  return out;
}

/// `local_ratio[i][n]` = log p_F^n(τ_i) - log p_B^n(τ_i | x_i) under local
/// snapshot n. Pairs are (i, i + B/2); local terms carry no gradient.
inline LossValue ab_batch(std::span<const Trajectory> batch, const std::vector<std::vector<double>>& local_ratio,
                          std::span<const double> weights) {
  detail::require_pairs(batch.size());
  if (weights.empty()) throw Error(Errc::no_snapshots, "aggregation needs at least one local snapshot");
  if (local_ratio.size() != batch.size()) throw Error(Errc::dimension_mismatch, "local ratio table size mismatch");
  const std::size_t half = batch.size() / 2;
  auto pooled = [&](std::size_t i) {
    if (local_ratio[i].size() != weights.size()) throw Error(Errc::dimension_mismatch, "weights / snapshots mismatch");
    double s = 0.0;
    for (std::size_t n = 0; n < weights.size(); ++n) s += weights[n] * local_ratio[i][n];
    return s;
  };
  LossValue out;
  out.grad.traj_coef.assign(batch.size(), 0.0);
  for (std::size_t i = 0; i < half; ++i) {
    const Trajectory& a = batch[i];
    const Trajectory& b = batch[i + half];
    const double global = (a.sum_log_pf() - a.sum_log_pb()) - (b.sum_log_pf() - b.sum_log_pb());
    const double d = global - (pooled(i) - pooled(i + half));
    out.loss += d * d / static_cast<double>(half);
    out.grad.traj_coef[i] += 2.0 * d / static_cast<double>(half);
    out.grad.traj_coef[i + half] -= 2.0 * d / static_cast<double>(half);
  }
  return out;
}

/// Single-pair AB value from raw quantities.
inline double ab_pair_loss(const Trajectory& a, const Trajectory& b, std::span<const double> local_ratio_a,
                           std::span<const double> local_ratio_b, std::span<const double> weights) {
  double d = (a.sum_log_pf() - a.sum_log_pb()) - (b.sum_log_pf() - b.sum_log_pb());
  for (std::size_t n = 0; n < weights.size(); ++n) d -= weights[n] * (local_ratio_a[n] - local_ratio_b[n]);
  return d * d;
}

}  // namespace epgfn
