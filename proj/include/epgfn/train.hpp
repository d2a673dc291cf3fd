#pragma once

// Client-side training: batched sampling, balance losses, AdamW updates and
// periodic evaluation against the client's own normalized reward.

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "epgfn/common.hpp"
#include "epgfn/env.hpp"
#include "epgfn/eval.hpp"
#include "epgfn/losses.hpp"
#include "epgfn/nn.hpp"
#include "epgfn/policy.hpp"

namespace epgfn {

struct TrainConfig {
  LossSpec loss;
  HeadConfig head;
  AdamWConfig optim;
  std::size_t epochs = 1000;
  std::size_t batch = 64;
  double epsilon = 0.1;
  std::uint64_t seed = 0;
  std::size_t eval_every = 100;
  std::size_t eval_samples = 100000;
  double state_guard = kDefaultStateGuard;
  double stop_l1 = 0.0;  // > 0 ends training once an evaluation reaches it
  double lr_final = 1.0;  // cosine decay of every learning rate to this fraction; 1 keeps it constant

  void validate() const {
    loss.validate();
    if (epochs < 1) throw Error(Errc::invalid_config, "train.epochs must be >= 1");
    if (batch < 2) throw Error(Errc::invalid_config, "train.batch must be >= 2");
    if ((loss.kind == LossKind::cb || loss.kind == LossKind::ab) && batch % 2)
      throw Error(Errc::invalid_config, "train.batch must be even for pair losses");
    if (!(epsilon >= 0 && epsilon <= 1)) throw Error(Errc::invalid_config, "loss.epsilon must lie in [0, 1]");
    if (!(optim.lr > 0)) throw Error(Errc::invalid_config, "train.lr must be > 0");
    if (eval_every < 1) throw Error(Errc::invalid_config, "train.eval_every must be >= 1");
    if (!(lr_final > 0 && lr_final <= 1)) throw Error(Errc::invalid_config, "train.lr_final must lie in (0, 1]");
  }

  /// Learning-rate multiplier for 1-based epoch `e`.
  double lr_scale(std::size_t e) const {
    if (lr_final >= 1.0 || epochs < 2) return 1.0;
    const double t = static_cast<double>(e - 1) / static_cast<double>(epochs - 1);
    return lr_final + (1.0 - lr_final) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  }
};

struct MetricRow {
  std::size_t epoch = 0;
  double loss = 0.0;
  double l1 = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0.0;
};

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << "epoch,loss,l1,wall_ms\n";
  os.precision(17);
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.loss << ',';
    if (!std::isnan(r.l1)) os << r.l1;
    os << ',' << static_cast<long long>(r.wall_ms) << '\n';
  }
}

/// Reference distribution for periodic L1 probes. Exact when the state space
/// is enumerable, sampled otherwise.
class Evaluator {
 public:
  Evaluator() = default;
  Evaluator(EnvPtr env, DistributionTable target, double guard = kDefaultStateGuard, std::size_t samples = 100000)
      : env_(std::move(env)), target_(std::move(target)), samples_(samples) {
    try {
      space_ = std::make_shared<StateSpace>(enumerate_states(*env_, guard));
    } catch (const Error& e) {
      if (e.code() != Errc::enumeration_too_large) throw;
    }
  }

  /// Target = the environment's own normalized reward.
  static Evaluator for_reward(EnvPtr env, double guard = kDefaultStateGuard, std::size_t samples = 100000) {
    Evaluator ev;
    ev.env_ = env;
    ev.samples_ = samples;
    ev.space_ = std::make_shared<StateSpace>(enumerate_states(*env, guard));
    ev.target_ = reward_table(*env, *ev.space_);
    return ev;
  }

  bool active() const { return env_ != nullptr; }
  bool exact() const { return space_ != nullptr; }
  const DistributionTable& target() const { return target_; }
  const StateSpace* space() const { return space_.get(); }

  DistributionTable distribution(const ForwardPolicy& policy, Rng& rng) const {
    if (space_) return exact_pT(policy, *env_, *space_);
    return sampled_pT(policy, *env_, samples_, rng);
  }
  double l1_of(const ForwardPolicy& policy, Rng& rng) const { return l1(distribution(policy, rng), target_); }

 private:
  EnvPtr env_;
  std::shared_ptr<StateSpace> space_;
  DistributionTable target_;
  std::size_t samples_ = 100000;
};

struct LearnerGrad {
  std::vector<double> policy;
  std::vector<double> flow;
  double log_z = 0.0;
};

/// Parameters and optimizers of one GFlowNet: forward policy, optional state
/// flow (DB) and log Z (TB).
class Learner {
 public:
  Learner(EnvPtr env, const TrainConfig& cfg, Rng& init_rng) : env_(std::move(env)), cfg_(cfg) {
    cfg_.validate();
    if (cfg_.loss.kind == LossKind::dbc && !env_->all_states_terminal())
      throw Error(Errc::unsupported_loss, "dbc needs an environment where every state is terminal");
    policy = ForwardPolicy(make_head(cfg_.head, *env_, env_->action_count(), init_rng));
    if (cfg_.loss.kind == LossKind::db) flow = make_head(cfg_.head, *env_, 1, init_rng);
    policy_opt_ = make_optimizer(policy.head());
    if (flow) flow_opt_ = make_optimizer(*flow);
    AdamWConfig zc = cfg_.optim;
    zc.lr = cfg_.loss.logz_lr;
    logz_opt_ = AdamW(zc, 1, {{0, 1, cfg_.loss.logz_lr, false}});
  }

  ForwardPolicy policy;
  std::optional<Head> flow;
  double log_z = 0.0;

  const Environment& env() const { return *env_; }
  const TrainConfig& config() const { return cfg_; }

  /// Memoized terminal log-reward.
  double log_reward(const StateKey& x) {
    auto [it, fresh] = reward_memo_.try_emplace(x, 0.0);
    if (fresh) it->second = env_->log_reward(x);
    return it->second;
  }

  void fill_rewards(std::vector<Trajectory>& batch) {
    for (auto& t : batch) t.log_reward = log_reward(t.terminal());
  }

  /// Adds zero rows for every visited state (tabular heads only).
  void ensure_rows(const std::vector<Trajectory>& batch) {
    for (const auto& t : batch)
      for (const auto& s : t.states) {
        policy.head().ensure_row(s);
        if (flow) flow->ensure_row(s);
      }
  }

  /// Loss of `batch` under the current parameters (log p_F is recomputed and
  /// written back). `local_ratio` feeds AB. Gradients accumulate into `grad`.
  double objective(std::vector<Trajectory>& batch, const std::vector<std::vector<double>>* local_ratio = nullptr,
                   LearnerGrad* grad = nullptr, std::vector<TrajectoryTrace>* traces = nullptr) {
    ensure_rows(batch);
    std::vector<TrajectoryTrace> own;
    if (!traces) {
      own.resize(batch.size());
      const bool mlp = policy.head().backend() == Backend::mlp;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        auto& t = batch[i];
        own[i].resize(t.states.size());
        for (std::size_t k = 0; k < t.states.size(); ++k) {
          policy.distribution(*env_, t.states[k], own[i][k].dist, mlp ? &own[i][k].cache : nullptr);
          t.log_pf[k] = own[i][k].dist.logp[t.actions[k]];
        }
      }
      traces = &own;
    }

    std::vector<std::vector<double>> log_flow;
    std::vector<std::vector<MlpCache>> flow_cache;
    LossValue lv;
    switch (cfg_.loss.kind) {
      case LossKind::tb: lv = tb_batch(batch, log_z); break;
      case LossKind::cb: lv = cb_batch(batch); break;
      case LossKind::vl: lv = vl_batch(batch); break;
      case LossKind::ab: {
        if (!local_ratio) throw Error(Errc::no_snapshots, "ab objective needs local snapshot terms");
        std::vector<double> w = cfg_.loss.weights;
        if (w.empty()) w.assign(local_ratio->empty() ? 0 : local_ratio->front().size(), 1.0);
        lv = ab_batch(batch, *local_ratio, w);
        break;
      }
      case LossKind::db: {
        log_flow.resize(batch.size());
        flow_cache.resize(batch.size());
        std::vector<double> out;
        const bool mlp = flow->backend() == Backend::mlp;
        for (std::size_t i = 0; i < batch.size(); ++i) {
          flow_cache[i].resize(batch[i].states.size());
          for (std::size_t k = 0; k < batch[i].states.size(); ++k) {
            flow->forward(*env_, batch[i].states[k], out, mlp ? &flow_cache[i][k] : nullptr);
            log_flow[i].push_back(out[0]);
          }
        }
        lv = db_batch(batch, log_flow);
        break;
      }
      case LossKind::dbc: {
        std::vector<std::vector<double>> stop_lp(batch.size()), state_lr(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i)
          for (std::size_t k = 0; k < batch[i].states.size(); ++k) {
            stop_lp[i].push_back((*traces)[i][k].dist.logp[env_->stop_action()]);
            state_lr[i].push_back(log_reward(batch[i].states[k]));
          }
        lv = dbc_batch(batch, stop_lp, state_lr, env_->stop_action());
        break;
      }
    }
    if (!std::isfinite(lv.loss)) throw Error(Errc::non_finite, "non-finite " + std::string(loss_name(cfg_.loss.kind)) + " loss");
    if (!grad) return lv.loss;

    grad->policy.resize(policy.head().params().size(), 0.0);
    grad->log_z += lv.grad.dlog_z;
    // per-step coefficient vectors over actions
    const std::size_t width = env_->action_count();
    std::vector<std::vector<double>> w(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      w[i].assign(batch[i].states.size() * width, 0.0);
      for (std::size_t k = 0; k < batch[i].states.size(); ++k) w[i][k * width + batch[i].actions[k]] += lv.grad.traj_coef[i];
    }
    for (const auto& sc : lv.grad.steps) w[sc.traj][sc.step * width + sc.action] += sc.coef;
    std::vector<double> out_grad(width);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      for (std::size_t k = 0; k < batch[i].states.size(); ++k) {
        const double* wk = w[i].data() + k * width;
        double sum = 0.0;
        for (std::size_t a = 0; a < width; ++a) sum += wk[a];
        if (sum == 0.0 && std::all_of(wk, wk + width, [](double x) { return x == 0.0; })) continue;
        const auto& st = (*traces)[i][k];
        for (std::size_t a = 0; a < width; ++a) out_grad[a] = wk[a] - sum * st.dist.prob[a];
        policy.head().backward(batch[i].states[k], &st.cache, out_grad, grad->policy);
      }
    }
    if (flow) {
      grad->flow.resize(flow->params().size(), 0.0);
      for (std::size_t i = 0; i < batch.size(); ++i)
        for (std::size_t k = 0; k < batch[i].states.size(); ++k) {
          const double g = lv.grad.dlog_flow[i][k];
          if (g != 0.0) flow->backward(batch[i].states[k], &flow_cache[i][k], std::span<const double>(&g, 1), grad->flow);
        }
    }
    return lv.loss;
  }

  void set_lr_scale(double s) {
    policy_opt_.set_lr_scale(s);
    flow_opt_.set_lr_scale(s);
    logz_opt_.set_lr_scale(s);
  }

  /// One optimizer step on `batch`; returns the loss before the update.
  double step(std::vector<Trajectory>& batch, std::vector<TrajectoryTrace>* traces = nullptr,
              const std::vector<std::vector<double>>* local_ratio = nullptr) {
    LearnerGrad g;
    const double loss = objective(batch, local_ratio, &g, traces);
    policy_opt_.resize(policy.head().params().size());
    policy_opt_.step(policy.head().params(), g.policy);
    if (flow) {
      flow_opt_.resize(flow->params().size());
      flow_opt_.step(flow->params(), g.flow);
    }
    if (cfg_.loss.kind == LossKind::tb) logz_opt_.step(std::span<double>(&log_z, 1), std::span<const double>(&g.log_z, 1));
    return loss;
  }

  /// Samples a batch from the ε-mixture with traces for the backward pass.
  std::vector<Trajectory> sample_batch(Rng& rng, std::vector<TrajectoryTrace>& traces, double epsilon) const {
    std::vector<Trajectory> batch;
    batch.reserve(cfg_.batch);
    traces.resize(cfg_.batch);
    for (std::size_t i = 0; i < cfg_.batch; ++i) batch.push_back(sample_trajectory(policy, *env_, epsilon, rng, &traces[i]));
    return batch;
  }

 private:
  AdamW make_optimizer(const Head& h) const {
    const bool decay = h.backend() == Backend::mlp;
    return AdamW(cfg_.optim, h.params().size(), {{0, h.params().size(), 0.0, decay}});
  }

  EnvPtr env_;
  TrainConfig cfg_;
  AdamW policy_opt_, flow_opt_, logz_opt_;
  StateMap<double> reward_memo_;
};

struct TrainResult {
  PolicySnapshot snapshot;
  std::vector<MetricRow> metrics;
  double log_z = 0.0;
  std::optional<std::size_t> epochs_to_stop;  // first evaluation epoch meeting stop_l1
};

inline PolicySnapshot make_snapshot(const Environment& env, const ForwardPolicy& policy, const TrainConfig& cfg,
                                    std::size_t epochs_run) {
  PolicySnapshot snap;
  snap.env_fingerprint = env.fingerprint();
  snap.policy = policy;
  snap.meta["loss"] = loss_name(cfg.loss.kind);
  snap.meta["epochs"] = std::to_string(epochs_run);
  snap.meta["seed"] = std::to_string(cfg.seed);
  return snap;
}

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

/// Shared epoch loop of local training and aggregation.
template <class Epoch>
std::vector<MetricRow> run_epochs(const TrainConfig& cfg, const Evaluator& eval, const ForwardPolicy& policy, Rng& eval_rng,
                                  Epoch&& epoch, std::optional<std::size_t>& reached, std::size_t& epochs_run) {
  std::vector<MetricRow> rows;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    MetricRow row;
    row.epoch = e;
    row.loss = epoch(e);
    if (eval.active() && (e % cfg.eval_every == 0 || e == cfg.epochs)) row.l1 = eval.l1_of(policy, eval_rng);
    row.wall_ms = elapsed_ms(t0);
    rows.push_back(row);
    epochs_run = e;
    if (cfg.stop_l1 > 0 && !std::isnan(row.l1) && row.l1 <= cfg.stop_l1) {
      reached = e;
      break;
    }
  }
  return rows;
}

}  // namespace detail

/// Trains one client GFlowNet on `env`'s reward. `eval` may be inactive.
inline TrainResult train_local(EnvPtr env, const TrainConfig& cfg, const Evaluator& eval = {}) {
  cfg.validate();
  if (cfg.loss.kind == LossKind::ab) throw Error(Errc::unsupported_loss, "ab is a server-side loss");
  Rng rng(cfg.seed);
  Rng eval_rng(derive_seed(cfg.seed, 0xe7a1));
  Learner learner(env, cfg, rng);
  std::vector<TrajectoryTrace> traces;
  TrainResult res;
  std::size_t run = 0;
  res.metrics = detail::run_epochs(
      cfg, eval, learner.policy, eval_rng,
      [&](std::size_t e) {
        learner.set_lr_scale(cfg.lr_scale(e));
        auto batch = learner.sample_batch(rng, traces, cfg.epsilon);
        learner.fill_rewards(batch);
        return learner.step(batch, &traces);
      },
      res.epochs_to_stop, run);
  res.log_z = learner.log_z;
  res.snapshot = make_snapshot(*env, learner.policy, cfg, run);
  return res;
}

struct ClientJob {
  EnvPtr env;
  TrainConfig config;
  Evaluator eval;
};

struct ClientOutcome {
  std::optional<TrainResult> result;
  std::string error;
  int error_code = 0;  // Errc + 1 when the failure was a library error
};

/// Trains every client with up to `parallelism` threads. Client k's seed is
/// derive_seed(master_seed, k); outcomes keep input order.
inline std::vector<ClientOutcome> train_clients(std::vector<ClientJob> jobs, std::size_t parallelism, std::uint64_t master_seed) {
  std::vector<ClientOutcome> out(jobs.size());
  for (std::size_t k = 0; k < jobs.size(); ++k) jobs[k].config.seed = derive_seed(master_seed, k);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < jobs.size(); k = next++) {
      try {
        out[k].result = train_local(jobs[k].env, jobs[k].config, jobs[k].eval);
      } catch (const Error& e) {
        out[k].error = e.what();
        out[k].error_code = static_cast<int>(e.code()) + 1;
      } catch (const std::exception& e) {
        out[k].error = e.what();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(parallelism, jobs.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return out;
}

}  // namespace epgfn
