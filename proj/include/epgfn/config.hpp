#pragma once

// Run configuration: a flat `dotted.key = value` text file plus overrides.

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "epgfn/common.hpp"
#include "epgfn/env.hpp"
#include "epgfn/losses.hpp"
#include "epgfn/policy.hpp"

namespace epgfn {

class ConfigMap {
 public:
  ConfigMap() = default;
  explicit ConfigMap(std::map<std::string, std::string> values) : values_(std::move(values)) {}

  static ConfigMap parse(const std::string& text) {
    ConfigMap c;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw Error(Errc::invalid_config, "line " + std::to_string(lineno) + ": expected key = value");
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  static ConfigMap load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::invalid_config, "cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  /// Applies a `key=value` override.
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error(Errc::invalid_config, "override '" + kv + "' is not key=value");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  void set(const std::string& key, const std::string& value) {
    if (key.empty()) throw Error(Errc::invalid_config, "empty config key");
    values_[key] = value;
  }
  bool has(const std::string& key) const { return values_.contains(key); }
  const std::map<std::string, std::string>& values() const { return values_; }

  std::string str(const std::string& key, const std::string& def) const {
    used_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? def : it->second;
  }
  double real(const std::string& key, double def) const {
    const std::string s = str(key, "");
    if (s.empty()) return def;
    return parse_real(key, s);
  }
  std::int64_t integer(const std::string& key, std::int64_t def) const {
    const std::string s = str(key, "");
    if (s.empty()) return def;
    std::size_t pos = 0;
    std::int64_t v = 0;
    try {
      v = std::stoll(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != s.size()) {
      // accept integral scientific notation such as 1e5
      const double d = parse_real(key, s);
      if (d != static_cast<double>(static_cast<std::int64_t>(d))) throw Error(Errc::invalid_config, key + ": expected an integer, got '" + s + "'");
      return static_cast<std::int64_t>(d);
    }
    return v;
  }
  std::size_t count(const std::string& key, std::size_t def) const {
    const auto v = integer(key, static_cast<std::int64_t>(def));
    if (v < 0) throw Error(Errc::invalid_config, key + ": must be >= 0");
    return static_cast<std::size_t>(v);
  }
  bool boolean(const std::string& key, bool def) const {
    const std::string s = str(key, "");
    if (s.empty()) return def;
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw Error(Errc::invalid_config, key + ": expected a boolean, got '" + s + "'");
  }
  std::vector<double> reals(const std::string& key, const std::vector<double>& def = {}) const {
    const std::string s = str(key, "");
    if (s.empty()) return def;
    std::vector<double> out;
    for (const auto& item : split(s, ',')) out.push_back(parse_real(key, trim(item)));
    return out;
  }
  std::vector<std::string> strings(const std::string& key, const std::vector<std::string>& def = {}) const {
    const std::string s = str(key, "");
    if (s.empty()) return def;
    std::vector<std::string> out;
    for (const auto& item : split(s, ',')) out.push_back(trim(item));
    return out;
  }

  /// Keys never read by any accessor.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.contains(k)) out.push_back(k);
    return out;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }
  static std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, sep)) out.push_back(item);
    return out;
  }

 private:
  static double parse_real(const std::string& key, const std::string& s) {
    std::size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != s.size() || s.empty()) throw Error(Errc::invalid_config, key + ": expected a number, got '" + s + "'");
    return v;
  }

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  EnvKind kind = EnvKind::grid;
  // grid
  int grid_size = 9;
  std::vector<std::vector<std::pair<int, int>>> grid_beacons;  // explicit, per client
  int grid_beacons_per_client = 2;
  std::uint64_t grid_beacons_seed = 1;
  double grid_kappa = 1.0, grid_delta = 2.0;
  // multiset
  int ms_dict = 10, ms_target = 8;
  std::uint64_t ms_values_seed = 1;
  // sequence
  int seq_len = 6, seq_tokens = 6;
  std::uint64_t seq_scores_seed = 1;
  // phylo
  int phylo_leaves = 5, phylo_sites = 500;
  double phylo_b = 0.1, phylo_mu = 1.0, phylo_gamma = 2.0;
  std::uint64_t phylo_truth_seed = 1;
  std::string phylo_sites_file;
  bool phylo_random_shards = false;

  std::size_t clients = 2;
  double noise_sigma2 = 0.0;

  LossSpec loss;
  double local_epsilon = 0.1;

  Backend backend = Backend::mlp;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t train_epochs = 1000, train_batch = 64;
  double train_lr = 3e-3, weight_decay = 1e-4, clip = 0.0;
  std::size_t eval_every = 100, parallelism = 1;
  double stop_l1 = 0.0;

  std::size_t agg_epochs = 1000, agg_batch = 64;
  double agg_lr = 3e-3, agg_epsilon = 0.5;
  double lr_final = 1.0, agg_lr_final = 1.0;

  std::size_t eval_samples = 100000, topk = 800, pcvi_samples = 100000;
  double state_guard = kDefaultStateGuard;

  std::string sweep_axis;
  std::vector<double> sweep_values;
  std::vector<std::string> sweep_losses;
  std::size_t sweep_seeds = 1;
  bool sweep_parallel = false;

  static RunConfig from(const ConfigMap& c) {
    RunConfig r;
    r.name = c.str("experiment.name", r.name);
    r.seed = static_cast<std::uint64_t>(c.integer("experiment.seed", 0));
    r.out_dir = c.str("experiment.out_dir", r.out_dir);
    try {
      r.kind = parse_env_kind(c.str("env.kind", "grid"));
    } catch (const Error&) {
      throw Error(Errc::invalid_config, "env.kind: expected grid | multiset | sequence | phylo");
    }

    r.grid_size = static_cast<int>(c.integer("env.grid.size", r.grid_size));
    if (const auto b = c.str("env.grid.beacons", ""); !b.empty()) r.grid_beacons = parse_beacons(b);
    r.grid_beacons_per_client = static_cast<int>(c.integer("env.grid.beacons_per_client", r.grid_beacons_per_client));
    r.grid_beacons_seed = static_cast<std::uint64_t>(c.integer("env.grid.beacons_seed", 1));
    r.grid_kappa = c.real("env.grid.kappa", r.grid_kappa);
    r.grid_delta = c.real("env.grid.delta", r.grid_delta);

    r.ms_dict = static_cast<int>(c.integer("env.multiset.dict_size", r.ms_dict));
    r.ms_target = static_cast<int>(c.integer("env.multiset.target_size", r.ms_target));
    r.ms_values_seed = static_cast<std::uint64_t>(c.integer("env.multiset.values_seed", 1));

    r.seq_len = static_cast<int>(c.integer("env.sequence.max_len", r.seq_len));
    r.seq_tokens = static_cast<int>(c.integer("env.sequence.num_tokens", r.seq_tokens));
    r.seq_scores_seed = static_cast<std::uint64_t>(c.integer("env.sequence.scores_seed", 1));

    r.phylo_leaves = static_cast<int>(c.integer("env.phylo.leaves", r.phylo_leaves));
    r.phylo_sites = static_cast<int>(c.integer("env.phylo.sites", r.phylo_sites));
    r.phylo_b = c.real("env.phylo.branch_length", r.phylo_b);
    r.phylo_mu = c.real("env.phylo.mu", r.phylo_mu);
    r.phylo_gamma = c.real("env.phylo.gamma", r.phylo_gamma);
    r.phylo_truth_seed = static_cast<std::uint64_t>(c.integer("env.phylo.truth_seed", 1));
    r.phylo_sites_file = c.str("env.phylo.sites_file", "");
    r.phylo_random_shards = c.boolean("env.phylo.random_shards", false);

    r.clients = c.count("clients.count", r.clients);
    r.noise_sigma2 = c.real("clients.noise_sigma2", 0.0);

    r.loss.kind = parse_loss_key(c.str("loss.kind", "cb"));
    r.loss.logz_lr = c.real("loss.logz_lr", r.loss.logz_lr);
    r.loss.weights = c.reals("loss.weights");
    r.local_epsilon = c.real("loss.epsilon", r.local_epsilon);

    r.backend = parse_backend_key(c.str("train.backend", r.kind == EnvKind::phylo ? "tabular" : "mlp"));
    {
      std::vector<std::size_t> h;
      for (double w : c.reals("train.hidden", {64, 64})) h.push_back(static_cast<std::size_t>(w));
      r.hidden = h;
    }
    r.train_epochs = c.count("train.epochs", r.train_epochs);
    r.train_batch = c.count("train.batch", r.train_batch);
    r.train_lr = c.real("train.lr", r.train_lr);
    r.weight_decay = c.real("train.weight_decay", r.weight_decay);
    r.clip = c.real("train.clip", r.clip);
    r.eval_every = c.count("train.eval_every", r.eval_every);
    r.parallelism = c.count("train.parallelism", r.parallelism);
    r.stop_l1 = c.real("train.stop_l1", r.stop_l1);
    r.lr_final = c.real("train.lr_final", r.lr_final);

    r.agg_epochs = c.count("aggregate.epochs", r.train_epochs);
    r.agg_batch = c.count("aggregate.batch", r.train_batch);
    r.agg_lr = c.real("aggregate.lr", r.train_lr);
    r.agg_epsilon = c.real("aggregate.epsilon", r.agg_epsilon);
    r.agg_lr_final = c.real("aggregate.lr_final", r.lr_final);

    r.eval_samples = c.count("eval.samples", r.eval_samples);
    r.topk = c.count("eval.topk", r.topk);
    r.pcvi_samples = c.count("eval.pcvi_samples", r.pcvi_samples);
    r.state_guard = c.real("eval.state_guard", r.state_guard);

    r.sweep_axis = c.str("sweep.axis", "");
    r.sweep_values = c.reals("sweep.values");
    r.sweep_losses = c.strings("sweep.losses");
    r.sweep_seeds = c.count("sweep.seeds", 1);
    r.sweep_parallel = c.boolean("sweep.parallel", false);

    if (const auto extra = c.unused(); !extra.empty()) throw Error(Errc::invalid_config, "unknown config key '" + extra.front() + "'");
    r.validate();
    return r;
  }

  void validate() const {
    if (clients < 1) throw Error(Errc::invalid_config, "clients.count: must be >= 1");
    if (!grid_beacons.empty() && grid_beacons.size() != clients)
      throw Error(Errc::invalid_config, "env.grid.beacons: one beacon group per client required");
    if (grid_beacons_per_client < 1) throw Error(Errc::invalid_config, "env.grid.beacons_per_client: must be >= 1");
    if (!loss.weights.empty() && loss.weights.size() != clients)
      throw Error(Errc::invalid_config, "loss.weights: one weight per client required");
    for (double w : loss.weights)
      if (!(w > 0)) throw Error(Errc::invalid_config, "loss.weights: weights must be > 0");
    if (loss.kind == LossKind::ab) throw Error(Errc::invalid_config, "loss.kind: ab is the server-side loss, not a client loss");
    if (!(loss.logz_lr > 0)) throw Error(Errc::invalid_config, "loss.logz_lr: must be > 0");
    if (!(local_epsilon >= 0 && local_epsilon <= 1)) throw Error(Errc::invalid_config, "loss.epsilon: must lie in [0, 1]");
    if (!(agg_epsilon >= 0 && agg_epsilon <= 1)) throw Error(Errc::invalid_config, "aggregate.epsilon: must lie in [0, 1]");
    if (train_epochs < 1) throw Error(Errc::invalid_config, "train.epochs: must be >= 1");
    if (agg_epochs < 1) throw Error(Errc::invalid_config, "aggregate.epochs: must be >= 1");
    if (train_batch < 2 || train_batch % 2) throw Error(Errc::invalid_config, "train.batch: must be even and >= 2");
    if (agg_batch < 2 || agg_batch % 2) throw Error(Errc::invalid_config, "aggregate.batch: must be even and >= 2");
    if (!(train_lr > 0)) throw Error(Errc::invalid_config, "train.lr: must be > 0");
    if (!(agg_lr > 0)) throw Error(Errc::invalid_config, "aggregate.lr: must be > 0");
    if (!(lr_final > 0 && lr_final <= 1)) throw Error(Errc::invalid_config, "train.lr_final: must lie in (0, 1]");
    if (!(agg_lr_final > 0 && agg_lr_final <= 1)) throw Error(Errc::invalid_config, "aggregate.lr_final: must lie in (0, 1]");
    if (eval_every < 1) throw Error(Errc::invalid_config, "train.eval_every: must be >= 1");
    if (!(noise_sigma2 >= 0)) throw Error(Errc::invalid_config, "clients.noise_sigma2: must be >= 0");
    if (hidden.empty()) throw Error(Errc::invalid_config, "train.hidden: at least one hidden layer");
    for (auto h : hidden)
      if (h < 1) throw Error(Errc::invalid_config, "train.hidden: widths must be >= 1");
    if (kind == EnvKind::phylo && backend == Backend::mlp)
      throw Error(Errc::invalid_config, "train.backend: phylo states are not featurized; use tabular");
    if (kind == EnvKind::phylo && phylo_sites_file.empty() && phylo_sites < static_cast<int>(clients))
      throw Error(Errc::invalid_config, "env.phylo.sites: need at least one site per client");
    if (!sweep_axis.empty() && sweep_axis != "clients" && sweep_axis != "logz_lr" && sweep_axis != "noise" && sweep_axis != "loss")
      throw Error(Errc::invalid_config, "sweep.axis: expected clients | logz_lr | noise | loss");
  }

  static std::vector<std::vector<std::pair<int, int>>> parse_beacons(const std::string& s) {
    // "x:y,x:y;x:y,x:y", clients separated by ';'
    std::vector<std::vector<std::pair<int, int>>> out;
    for (const auto& group : ConfigMap::split(s, ';')) {
      auto& g = out.emplace_back();
      for (const auto& item : ConfigMap::split(group, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw Error(Errc::invalid_config, "env.grid.beacons: expected x:y, got '" + item + "'");
        try {
          g.emplace_back(std::stoi(item.substr(0, colon)), std::stoi(item.substr(colon + 1)));
        } catch (const std::exception&) {
          throw Error(Errc::invalid_config, "env.grid.beacons: bad coordinate '" + item + "'");
        }
      }
    }
    return out;
  }

 private:
  static LossKind parse_loss_key(const std::string& s) {
    try {
      return parse_loss(s);
    } catch (const Error&) {
      throw Error(Errc::invalid_config, "loss.kind: unknown loss '" + s + "' (expected tb | db | dbc | cb | vl)");
    }
  }
  static Backend parse_backend_key(const std::string& s) {
    try {
      return parse_backend(s);
    } catch (const Error&) {
      throw Error(Errc::invalid_config, "train.backend: unknown backend '" + s + "'");
    }
  }
};

}  // namespace epgfn
