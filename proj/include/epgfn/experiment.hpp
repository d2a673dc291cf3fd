#pragma once

// End-to-end experiment pipeline shared by the CLI and the acceptance suite:
// client construction, client training, aggregation, baselines, evaluation
// reports and sweeps.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "epgfn/aggregate.hpp"
#include "epgfn/config.hpp"
#include "epgfn/env.hpp"
#include "epgfn/eval.hpp"
#include "epgfn/train.hpp"

namespace epgfn {

using Json = nlohmann::ordered_json;

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error(Errc::io, "cannot write " + p.string());
  out << text;
}

// ---------------------------------------------------------------- clients

inline std::vector<std::pair<int, int>> random_beacons(int size, int count, Rng& rng) {
  std::vector<std::pair<int, int>> out;
  while (static_cast<int>(out.size()) < count) {
    std::pair<int, int> b{static_cast<int>(uniform_index(rng, static_cast<std::size_t>(size))),
                          static_cast<int>(uniform_index(rng, static_cast<std::size_t>(size)))};
    if (std::find(out.begin(), out.end(), b) == out.end()) out.push_back(b);
  }
  return out;
}

/// Full (unsharded) site matrix of a phylo run.
inline SiteData phylo_site_data(const RunConfig& rc) {
  if (!rc.phylo_sites_file.empty()) {
    std::ifstream in(rc.phylo_sites_file);
    if (!in) throw Error(Errc::invalid_config, "env.phylo.sites_file: cannot read " + rc.phylo_sites_file);
    return read_sites(in);
  }
  PhyloConfig pc;
  pc.branch_length = rc.phylo_b;
  pc.mu = rc.phylo_mu;
  Rng rng(rc.phylo_truth_seed);
  const StateKey truth = random_topology(rc.phylo_leaves, rng);
  Rng site_rng(derive_seed(rc.phylo_truth_seed, 1));
  return simulate_sites(pc, truth, rc.phylo_sites, site_rng);
}

inline std::vector<EnvConfig> client_env_configs(const RunConfig& rc) {
  std::vector<EnvConfig> out;
  if (rc.kind == EnvKind::phylo) {
    EnvConfig base;
    base.kind = EnvKind::phylo;
    base.phylo.leaves = rc.phylo_leaves;
    base.phylo.branch_length = rc.phylo_b;
    base.phylo.mu = rc.phylo_mu;
    base.phylo.gamma = rc.phylo_gamma;
    const SiteData data = phylo_site_data(rc);
    return split_sites(base, data, static_cast<int>(rc.clients),
                       rc.phylo_random_shards ? ShardMode::random : ShardMode::contiguous, derive_seed(rc.phylo_truth_seed, 2));
  }
  for (std::size_t n = 0; n < rc.clients; ++n) {
    EnvConfig c;
    c.kind = rc.kind;
    switch (rc.kind) {
      case EnvKind::grid: {
        c.grid.size = rc.grid_size;
        c.grid.kappa = rc.grid_kappa;
        c.grid.delta = rc.grid_delta;
        if (!rc.grid_beacons.empty()) {
          c.grid.beacons = rc.grid_beacons[n];
        } else {
          Rng rng(derive_seed(rc.grid_beacons_seed, n));
          c.grid.beacons = random_beacons(rc.grid_size, rc.grid_beacons_per_client, rng);
        }
        break;
      }
      case EnvKind::multiset: {
        c.multiset.dict_size = rc.ms_dict;
        c.multiset.target_size = rc.ms_target;
        Rng rng(derive_seed(rc.ms_values_seed, n));
        for (int u = 0; u < rc.ms_dict; ++u) c.multiset.values.push_back(uniform01(rng));
        break;
      }
      case EnvKind::sequence: {
        c.sequence.max_len = rc.seq_len;
        c.sequence.num_tokens = rc.seq_tokens;
        Rng rng(derive_seed(rc.seq_scores_seed, n));
        for (int i = 0; i < rc.seq_len; ++i) c.sequence.position_scores.push_back(uniform01(rng));
        for (int u = 0; u < rc.seq_tokens; ++u) c.sequence.token_scores.push_back(-2.0 * uniform01(rng));
        break;
      }
      case EnvKind::phylo: break;
    }
    out.push_back(std::move(c));
  }
  return out;
}

inline std::vector<EnvPtr> client_envs(const RunConfig& rc) {
  std::vector<EnvPtr> out;
  const auto cfgs = client_env_configs(rc);
  for (std::size_t n = 0; n < cfgs.size(); ++n) {
    EnvPtr env = make_environment(cfgs[n]);
    if (rc.noise_sigma2 > 0) {
      Rng rng(derive_seed(rc.seed, 0x5eed0000 + n));
      env = noisy_reward_wrap(env, rc.noise_sigma2, rng, rc.state_guard);
    }
    out.push_back(env);
  }
  return out;
}

inline TrainConfig local_train_config(const RunConfig& rc) {
  TrainConfig t;
  t.loss = rc.loss;
  t.loss.weights.clear();
  t.head.backend = rc.backend;
  t.head.hidden = rc.hidden;
  t.optim.lr = rc.train_lr;
  t.optim.weight_decay = rc.weight_decay;
  t.optim.clip_norm = rc.clip;
  t.epochs = rc.train_epochs;
  t.batch = rc.train_batch;
  t.epsilon = rc.local_epsilon;
  t.seed = rc.seed;
  t.eval_every = rc.eval_every;
  t.eval_samples = rc.eval_samples;
  t.state_guard = rc.state_guard;
  t.stop_l1 = rc.stop_l1;
  t.lr_final = rc.lr_final;
  return t;
}

inline TrainConfig aggregate_train_config(const RunConfig& rc) {
  TrainConfig t = local_train_config(rc);
  t.loss.kind = LossKind::ab;
  t.loss.weights = rc.loss.weights;
  t.optim.lr = rc.agg_lr;
  t.epochs = rc.agg_epochs;
  t.batch = rc.agg_batch;
  t.epsilon = rc.agg_epsilon;
  t.seed = derive_seed(rc.seed, 0xa66);
  t.stop_l1 = 0.0;
  t.lr_final = rc.agg_lr_final;
  return t;
}

/// Everything derived from a RunConfig before any training happens.
struct Experiment {
  RunConfig rc;
  std::vector<EnvPtr> clients;
  EnvPtr structure;  // DAG used by the server; its reward is never read there
  std::shared_ptr<StateSpace> space;
  DistributionTable target;

  static Experiment build(const RunConfig& rc) {
    Experiment x;
    x.rc = rc;
    x.clients = client_envs(rc);
    x.structure = x.clients.front();
    try {
      x.space = std::make_shared<StateSpace>(enumerate_states(*x.structure, rc.state_guard));
      x.target = reward_table(x.clients, rc.loss.weights, *x.space);
    } catch (const Error& e) {
      if (e.code() != Errc::enumeration_too_large) throw;
    }
    return x;
  }

  bool enumerable() const { return space != nullptr; }

  double pooled_log_reward(const StateKey& x) const { return epgfn::pooled_log_reward(clients, rc.loss.weights, x); }

  Evaluator global_evaluator() const {
    if (!enumerable()) return {};
    return Evaluator(structure, target, rc.state_guard, rc.eval_samples);
  }

  std::vector<ClientJob> client_jobs() const {
    std::vector<ClientJob> jobs;
    for (const auto& env : clients) {
      ClientJob j{env, local_train_config(rc), {}};
      try {
        j.eval = Evaluator::for_reward(env, rc.state_guard, rc.eval_samples);
      } catch (const Error& e) {
        if (e.code() != Errc::enumeration_too_large) throw;
      }
      jobs.push_back(std::move(j));
    }
    return jobs;
  }
};

inline std::vector<ClientOutcome> run_clients(const Experiment& x) {
  return train_clients(x.client_jobs(), x.rc.parallelism, x.rc.seed);
}

/// Throws the first client failure, otherwise returns the snapshots.
inline std::vector<PolicySnapshot> snapshots_of(const std::vector<ClientOutcome>& outcomes) {
  std::vector<PolicySnapshot> out;
  for (std::size_t k = 0; k < outcomes.size(); ++k) {
    if (!outcomes[k].result) {
      const Errc code = outcomes[k].error_code > 0 ? static_cast<Errc>(outcomes[k].error_code - 1) : Errc::non_finite;
      throw Error(code, "client " + std::to_string(k) + " failed: " + outcomes[k].error);
    }
    out.push_back(outcomes[k].result->snapshot);
  }
  return out;
}

inline TrainResult run_aggregate(const Experiment& x, const std::vector<PolicySnapshot>& snaps) {
  AggregationJob job{snaps, x.rc.loss.weights, aggregate_train_config(x.rc)};
  return aggregate_ab(x.structure, job, x.global_evaluator());
}

struct ModelMetrics {
  double l1 = std::numeric_limits<double>::quiet_NaN();
  double kl = std::numeric_limits<double>::quiet_NaN();
  double jeffrey = std::numeric_limits<double>::quiet_NaN();
  double topk = std::numeric_limits<double>::quiet_NaN();
};

inline Json metrics_json(const ModelMetrics& m) {
  Json j;
  auto put = [&](const char* k, double v) {
    if (std::isfinite(v)) j[k] = v;
    else j[k] = nullptr;
  };
  put("l1", m.l1);
  put("kl_target_model", m.kl);
  put("jeffrey", m.jeffrey);
  put("topk_avg_log_reward", m.topk);
  return j;
}

/// Metrics of a terminal distribution against the experiment target.
inline ModelMetrics table_metrics(const Experiment& x, const DistributionTable& model) {
  ModelMetrics m;
  m.l1 = l1(model, x.target);
  m.kl = kl(x.target, model);
  m.jeffrey = jeffrey(x.target, model);
  return m;
}

inline double reference_topk(const Experiment& x) {
  return topk_avg_log_reward(x.target, [&](const StateKey& s) { return x.pooled_log_reward(s); }, x.rc.eval_samples, x.rc.topk);
}

struct BaselineSet {
  bool pcvi = true;
  bool fedavg = true;
  bool naive = true;
};

/// Consolidated report over the global model, the clients and the baselines.
inline Json evaluate_report(const Experiment& x, const PolicySnapshot& global, const std::vector<PolicySnapshot>& clients,
                            const BaselineSet& baselines = {}) {
  Json r;
  r["experiment"] = x.rc.name;
  r["env"] = env_kind_name(x.rc.kind);
  r["env_fingerprint"] = x.structure->fingerprint();
  r["clients"] = clients.size();
  Json w = Json::array();
  for (double v : x.rc.loss.weights) w.push_back(v);
  r["weights"] = w;
  Rng rng(derive_seed(x.rc.seed, 0xe7a1));
  auto log_r = [&](const StateKey& s) { return x.pooled_log_reward(s); };

  if (!x.enumerable()) {
    r["evaluation"] = "sampled";
    const auto samples = sample_terminals(global.policy, *x.structure, x.rc.eval_samples, rng);
    const auto table = empirical_table(samples);
    r["samples"] = samples.size();
    r["distinct_terminals"] = table.prob.size();
    if (samples.size() >= x.rc.topk) r["models"]["ep"]["topk_avg_log_reward"] = topk_avg_log_reward(samples, log_r, x.rc.topk);
    return r;
  }
  r["evaluation"] = "exact";
  r["terminals"] = x.space->terminals.size();
  r["reference"]["topk_avg_log_reward"] = reference_topk(x);

  const auto ep_table = exact_pT(global.policy, *x.structure, *x.space);
  ModelMetrics ep = table_metrics(x, ep_table);
  {
    const auto samples = sample_terminals(global.policy, *x.structure, x.rc.eval_samples, rng);
    if (samples.size() >= x.rc.topk) ep.topk = topk_avg_log_reward(samples, log_r, x.rc.topk);
  }
  r["models"]["ep"] = metrics_json(ep);

  Json cl = Json::array();
  for (std::size_t n = 0; n < clients.size(); ++n) {
    const auto own = reward_table(*x.clients[n], *x.space);
    cl.push_back(l1(exact_pT(clients[n].policy, *x.clients[n], *x.space), own));
  }
  r["client_l1"] = cl;

  if (baselines.pcvi && x.rc.kind != EnvKind::phylo) {
    std::vector<PcviParams> parts;
    for (std::size_t n = 0; n < clients.size(); ++n) {
      Rng prng(derive_seed(x.rc.seed, 0x9c71 + n));
      parts.push_back(pcvi_fit(clients[n], *x.structure, x.rc.pcvi_samples, prng));
    }
    r["models"]["pcvi"] = metrics_json(table_metrics(x, pcvi_distribution(pcvi_pool(parts), *x.structure, *x.space)));
  }
  if (baselines.fedavg) {
    const auto avg = fedavg_average(clients);
    r["models"]["fedavg"] = metrics_json(table_metrics(x, exact_pT(avg.policy, *x.structure, *x.space)));
  }
  if (baselines.naive) {
    std::vector<const ForwardPolicy*> locals;
    for (const auto& c : clients) locals.push_back(&c.policy);
    r["models"]["naive_product"] = metrics_json(table_metrics(x, exact_pT(naive_product(locals, *x.structure), *x.structure, *x.space)));
  }
  return r;
}

// ---------------------------------------------------------------- output layout

struct OutputLayout {
  std::filesystem::path dir;

  static OutputLayout of(const RunConfig& rc) {
    std::filesystem::path root = rc.out_dir;
    if (const char* env = std::getenv("EPGFN_OUT"); env && *env) root = env;
    return {root / rc.name};
  }
  std::filesystem::path client_snapshot(std::size_t k) const { return dir / ("client" + std::to_string(k) + ".gfnpolicy"); }
  std::filesystem::path client_metrics(std::size_t k) const { return dir / ("client" + std::to_string(k) + ".csv"); }
  std::filesystem::path global_snapshot() const { return dir / "global.gfnpolicy"; }
  std::filesystem::path global_metrics() const { return dir / "global.csv"; }
  std::filesystem::path manifest() const { return dir / "manifest.txt"; }
  std::filesystem::path report() const { return dir / "report.json"; }
};

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  write_metrics_csv(os, rows);
  return os.str();
}

/// Manifest lines: `<snapshot path> <weight>`.
inline void write_manifest(const OutputLayout& out, std::size_t clients, const std::vector<double>& weights) {
  std::ostringstream os;
  for (std::size_t k = 0; k < clients; ++k) os << out.client_snapshot(k).filename().string() << ' ' << (weights.empty() ? 1.0 : weights[k]) << '\n';
  write_text(out.manifest(), os.str());
}

struct Manifest {
  std::vector<std::filesystem::path> paths;
  std::vector<double> weights;
};

inline Manifest read_manifest(const std::filesystem::path& path) {
  Manifest m;
  std::istringstream is(read_text(path));
  std::string line;
  while (std::getline(is, line)) {
    line = ConfigMap::trim(line);
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string p;
    double w = 1.0;
    ls >> p;
    if (!(ls >> w)) w = 1.0;
    std::filesystem::path fp = p;
    if (fp.is_relative()) fp = path.parent_path() / fp;
    if (!std::filesystem::exists(fp)) throw Error(Errc::io, "manifest entry missing: " + fp.string());
    m.paths.push_back(fp);
    m.weights.push_back(w);
  }
  if (m.paths.empty()) throw Error(Errc::no_snapshots, "manifest lists no snapshots");
  return m;
}

// ---------------------------------------------------------------- sweeps

struct SweepRow {
  double axis_value;
  std::size_t seed;
  std::size_t epoch;
  double metric;
  std::string label;  // loss name on the loss axis
};

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "axis_value,seed,epoch,metric\n";
  for (const auto& r : rows) {
    if (!r.label.empty()) os << r.label;
    else os << r.axis_value;
    os << ',' << r.seed << ',' << r.epoch << ',';
    if (std::isfinite(r.metric)) os << r.metric;
    os << '\n';
  }
  return os.str();
}

/// One sweep cell. Loss and log-Z axes train the first client only; client
/// and noise axes run the full client + aggregation pipeline.
inline std::vector<SweepRow> sweep_cell(RunConfig rc, const std::string& axis, double value, const std::string& label,
                                        std::size_t seed_index) {
  rc.seed = derive_seed(rc.seed, seed_index);
  if (axis == "clients") rc.clients = static_cast<std::size_t>(value);
  if (axis == "noise") rc.noise_sigma2 = value;
  if (axis == "logz_lr") {
    rc.loss.kind = LossKind::tb;
    rc.loss.logz_lr = value;
  }
  if (axis == "loss") rc.loss.kind = parse_loss(label);
  if (axis == "clients" && !rc.loss.weights.empty()) rc.loss.weights.clear();
  rc.validate();
  std::vector<SweepRow> rows;
  auto emit = [&](const std::vector<MetricRow>& m) {
    for (const auto& row : m)
      if (!std::isnan(row.l1)) rows.push_back({value, seed_index, row.epoch, row.l1, label});
  };
  if (axis == "loss" || axis == "logz_lr") {
    Experiment x = Experiment::build(rc);
    auto jobs = x.client_jobs();
    TrainConfig cfg = jobs.front().config;
    cfg.seed = rc.seed;
    emit(train_local(jobs.front().env, cfg, jobs.front().eval).metrics);
    return rows;
  }
  Experiment x = Experiment::build(rc);
  const auto snaps = snapshots_of(run_clients(x));
  emit(run_aggregate(x, snaps).metrics);
  return rows;
}

inline std::vector<SweepRow> run_sweep(const RunConfig& rc, std::ostream* log = nullptr) {
  std::vector<std::pair<double, std::string>> cells;
  if (rc.sweep_axis == "loss") {
    const auto losses = rc.sweep_losses.empty() ? std::vector<std::string>{"tb", "cb"} : rc.sweep_losses;
    for (std::size_t i = 0; i < losses.size(); ++i) cells.emplace_back(static_cast<double>(i), losses[i]);
  } else {
    if (rc.sweep_values.empty()) throw Error(Errc::invalid_config, "sweep.values: list the axis values to run");
    for (double v : rc.sweep_values) cells.emplace_back(v, "");
  }
  struct Cell {
    double value;
    std::string label;
    std::size_t seed;
    std::vector<SweepRow> rows;
    std::string error;
  };
  std::vector<Cell> work;
  for (const auto& [v, label] : cells)
    for (std::size_t s = 0; s < rc.sweep_seeds; ++s) work.push_back({v, label, s, {}, {}});
  auto run = [&](Cell& c) {
    try {
      c.rows = sweep_cell(rc, rc.sweep_axis, c.value, c.label, c.seed);
    } catch (const std::exception& e) {
      c.error = e.what();
      c.rows.push_back({c.value, c.seed, 0, std::numeric_limits<double>::quiet_NaN(), c.label});
    }
  };
  if (rc.sweep_parallel) {
    std::vector<std::thread> pool;
    for (auto& c : work) pool.emplace_back(run, std::ref(c));
    for (auto& t : pool) t.join();
  } else {
    for (auto& c : work) run(c);
  }
  std::vector<SweepRow> rows;
  for (const auto& c : work) {
    if (!c.error.empty() && log)
      *log << "sweep cell " << (c.label.empty() ? std::to_string(c.value) : c.label) << " seed " << c.seed << " failed: " << c.error << '\n';
    rows.insert(rows.end(), c.rows.begin(), c.rows.end());
  }
  return rows;
}

}  // namespace epgfn
