#pragma once

// Forward/backward policies, trajectory sampling and the snapshot envelope.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "epgfn/codec.hpp"
#include "epgfn/common.hpp"
#include "epgfn/env.hpp"
#include "epgfn/nn.hpp"

namespace epgfn {

enum class Backend { tabular, mlp };

inline const char* backend_name(Backend b) { return b == Backend::tabular ? "tabular" : "mlp"; }

inline Backend parse_backend(const std::string& s) {
  if (s == "tabular") return Backend::tabular;
  if (s == "mlp") return Backend::mlp;
  throw Error(Errc::invalid_config, "unknown backend '" + s + "'");
}

/// Maps a state to a fixed-width output vector: a lazily grown logit table
/// keyed by StateKey, or an MLP over the environment's featurization.
class Head {
 public:
  Head() = default;

  static Head tabular(std::size_t out) {
    Head h;
    h.backend_ = Backend::tabular;
    h.out_ = out;
    return h;
  }
  static Head mlp(MlpSpec spec, Rng& rng) {
    Head h;
    h.backend_ = Backend::mlp;
    h.out_ = spec.output();
    h.params_ = mlp_init(spec, rng);
    h.spec_ = std::move(spec);
    return h;
  }

  Backend backend() const { return backend_; }
  std::size_t output() const { return out_; }
  const MlpSpec& spec() const { return spec_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  const std::vector<StateKey>& keys() const { return keys_; }

  std::string arch() const {
    return backend_ == Backend::mlp ? "mlp:" + spec_.to_string() : "tabular:" + std::to_string(out_);
  }

  /// Row index of a tabular state, or npos when absent.
  std::size_t find_row(const StateKey& s) const {
    auto it = rows_.find(s);
    return it == rows_.end() ? npos : it->second;
  }

  /// Adds a zero row for `s` if absent. Returns true when the table grew.
  bool ensure_row(const StateKey& s) {
    if (backend_ != Backend::tabular) return false;
    auto [it, inserted] = rows_.try_emplace(s, keys_.size());
    if (!inserted) return false;
    keys_.push_back(s);
    params_.resize(params_.size() + out_, 0.0);
    return true;
  }

  void set_row(const StateKey& s, std::span<const double> values) {
    if (values.size() != out_) throw Error(Errc::dimension_mismatch, "row width mismatch");
    ensure_row(s);
    std::copy(values.begin(), values.end(), params_.begin() + static_cast<std::ptrdiff_t>(find_row(s) * out_));
  }

  void forward(const Environment& env, const StateKey& s, std::vector<double>& out, MlpCache* cache = nullptr) const {
    if (backend_ == Backend::mlp) {
      out = mlp_forward(spec_, params_, env.featurize(s), cache);
      return;
    }
    out.assign(out_, 0.0);
    const std::size_t r = find_row(s);
    if (r != npos) std::copy_n(params_.begin() + static_cast<std::ptrdiff_t>(r * out_), out_, out.begin());
  }

  /// grad += d(out_grad · forward(s)) / d params. Tabular rows must exist.
  void backward(const StateKey& s, const MlpCache* cache, std::span<const double> out_grad, std::span<double> grad) const {
    if (backend_ == Backend::mlp) {
      mlp_backward(spec_, params_, *cache, out_grad, grad);
      return;
    }
    const std::size_t r = find_row(s);
    if (r == npos) throw Error(Errc::dimension_mismatch, "tabular row missing for " + s.to_string());
    for (std::size_t a = 0; a < out_; ++a) grad[r * out_ + a] += out_grad[a];
  }

  /// Rebuilds a tabular head from explicit keys and row-major logits.
  static Head tabular_from(std::size_t out, std::vector<StateKey> keys, std::vector<double> params) {
    if (params.size() != keys.size() * out) throw Error(Errc::truncated_payload, "tabular payload size mismatch");
    Head h = tabular(out);
    for (std::size_t i = 0; i < keys.size(); ++i)
      if (!h.rows_.emplace(keys[i], i).second) throw Error(Errc::truncated_payload, "duplicate tabular key");
    h.keys_ = std::move(keys);
    h.params_ = std::move(params);
    return h;
  }
  static Head mlp_from(MlpSpec spec, std::vector<double> params) {
    if (params.size() != spec.param_count()) throw Error(Errc::truncated_payload, "mlp payload size mismatch");
    Head h;
    h.backend_ = Backend::mlp;
    h.out_ = spec.output();
    h.spec_ = std::move(spec);
    h.params_ = std::move(params);
    return h;
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  Backend backend_ = Backend::tabular;
  std::size_t out_ = 0;
  MlpSpec spec_;
  std::vector<double> params_;
  StateMap<std::size_t> rows_;
  std::vector<StateKey> keys_;
};

struct HeadConfig {
  Backend backend = Backend::mlp;
  std::vector<std::size_t> hidden{64, 64};
};

inline Head make_head(const HeadConfig& cfg, const Environment& env, std::size_t out, Rng& rng) {
  if (cfg.backend == Backend::tabular) return Head::tabular(out);
  if (env.feature_size() == 0)
    throw Error(Errc::unsupported_featurization, std::string(env_kind_name(env.kind())) + " requires the tabular backend");
  std::vector<std::size_t> widths{env.feature_size()};
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(out);
  return Head::mlp(MlpSpec(widths), rng);
}

/// Probabilities and log-probabilities over the full action head; masked
/// entries hold exactly 0 and -inf.
struct ActionDist {
  std::vector<ActionId> legal;
  std::vector<double> prob;
  std::vector<double> logp;
};

/// Masked softmax of `logits` restricted to `legal`.
inline void masked_softmax(std::span<const double> logits, const std::vector<ActionId>& legal, ActionDist& d) {
  d.prob.assign(logits.size(), 0.0);
  d.logp.assign(logits.size(), kNegInf);
  double m = kNegInf;
  for (ActionId a : legal) m = std::max(m, logits[a]);
  double z = 0.0;
  for (ActionId a : legal) z += std::exp(logits[a] - m);
  const double lz = m + std::log(z);
  for (ActionId a : legal) {
    d.logp[a] = logits[a] - lz;
    d.prob[a] = std::exp(d.logp[a]);
  }
}

class ForwardPolicy {
 public:
  ForwardPolicy() = default;
  explicit ForwardPolicy(Head head) : head_(std::move(head)) {}

  Head& head() { return head_; }
  const Head& head() const { return head_; }

  void distribution(const Environment& env, const StateKey& s, ActionDist& d, MlpCache* cache = nullptr) const {
    env.legal_actions(s, d.legal);
    if (d.legal.empty()) throw Error(Errc::env_integrity, "state " + s.to_string() + " has no children and no stop");
    std::vector<double> logits;
    head_.forward(env, s, logits, cache);
    if (logits.size() != env.action_count()) throw Error(Errc::architecture_mismatch, "policy head width != action count");
    masked_softmax(logits, d.legal, d);
  }

  /// Probabilities over the legal actions of `s`, in ascending action order.
  std::vector<std::pair<ActionId, double>> action_distribution(const Environment& env, const StateKey& s) const {
    env.validate(s);
    ActionDist d;
    distribution(env, s, d);
    std::vector<std::pair<ActionId, double>> out;
    for (ActionId a : d.legal) out.emplace_back(a, d.prob[a]);
    return out;
  }

 private:
  Head head_;
};

/// Uniform distribution over parents; the only backward mode.
struct BackwardPolicy {
  static constexpr const char* mode = "uniform";
  static double log_prob(const Environment& env, const StateKey& child) {
    return -std::log(static_cast<double>(env.parent_count(child)));
  }
};

struct Trajectory {
  std::vector<StateKey> states;   // s0 ... x
  std::vector<ActionId> actions;  // one per state; the last is stop
  std::vector<double> log_pf;     // per action, on-policy
  std::vector<double> log_pb;     // per state; entry k is log p_B(s_{k-1} | s_k), entry 0 is 0
  double log_reward = std::numeric_limits<double>::quiet_NaN();
  bool exploratory = false;

  const StateKey& terminal() const { return states.back(); }
  std::size_t length() const { return actions.size(); }
  double sum_log_pf() const { return std::accumulate(log_pf.begin(), log_pf.end(), 0.0); }
  double sum_log_pb() const { return std::accumulate(log_pb.begin(), log_pb.end(), 0.0); }
};

/// Per-step head evaluations kept for the backward pass.
struct StepTrace {
  ActionDist dist;
  MlpCache cache;
};
using TrajectoryTrace = std::vector<StepTrace>;

inline Trajectory sample_trajectory(const ForwardPolicy& policy, const Environment& env, double epsilon, Rng& rng,
                                    TrajectoryTrace* trace = nullptr) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw Error(Errc::invalid_config, "epsilon must lie in [0, 1]");
  Trajectory t;
  if (trace) trace->clear();
  StateKey s = env.initial_state();
  const std::size_t budget = env.max_trajectory_length() + 1;
  ActionDist local;
  const bool mlp = policy.head().backend() == Backend::mlp;
  for (std::size_t step = 0;; ++step) {
    if (step >= budget) throw Error(Errc::env_integrity, "trajectory exceeded the step budget");
    StepTrace* st = nullptr;
    if (trace) st = &trace->emplace_back();
    ActionDist& d = st ? st->dist : local;
    policy.distribution(env, s, d, st && mlp ? &st->cache : nullptr);
    ActionId a;
    if (epsilon > 0.0 && uniform01(rng) < epsilon) {
      a = d.legal[uniform_index(rng, d.legal.size())];
      t.exploratory = true;
    } else {
      const double u = uniform01(rng);
      double acc = 0.0;
      a = d.legal.back();
      for (ActionId c : d.legal) {
        acc += d.prob[c];
        if (u < acc) {
          a = c;
          break;
        }
      }
      // guard against rounding that lands on a zero-probability tail action
      if (d.prob[a] == 0.0)
        for (auto it = d.legal.rbegin(); it != d.legal.rend(); ++it)
          if (d.prob[*it] > 0.0) {
            a = *it;
            break;
          }
    }
    t.states.push_back(s);
    t.actions.push_back(a);
    t.log_pf.push_back(d.logp[a]);
    t.log_pb.push_back(step == 0 ? 0.0 : BackwardPolicy::log_prob(env, s));
    if (a == env.stop_action()) break;
    s = env.apply(s, a);
  }
  return t;
}

/// Checks that `t` is a complete path of `env` ending with the stop action.
inline void validate_trajectory(const Environment& env, const Trajectory& t) {
  if (t.states.empty() || t.actions.size() != t.states.size())
    throw Error(Errc::malformed_state, "trajectory shape is inconsistent");
  if (t.states.front() != env.initial_state()) throw Error(Errc::malformed_state, "trajectory does not start at s0");
  std::vector<ActionId> legal;
  for (std::size_t k = 0; k < t.states.size(); ++k) {
    env.validate(t.states[k]);
    env.legal_actions(t.states[k], legal);
    if (std::find(legal.begin(), legal.end(), t.actions[k]) == legal.end())
      throw Error(Errc::malformed_state, "illegal action in trajectory at step " + std::to_string(k));
    const bool last = k + 1 == t.states.size();
    if ((t.actions[k] == env.stop_action()) != last) throw Error(Errc::malformed_state, "stop action misplaced");
    if (!last && env.apply(t.states[k], t.actions[k]) != t.states[k + 1])
      throw Error(Errc::malformed_state, "invalid transition in trajectory at step " + std::to_string(k));
  }
}

/// Sum of log p_F along `t`, recomputed from the policy.
inline double traj_log_pf(const ForwardPolicy& policy, const Environment& env, const Trajectory& t) {
  validate_trajectory(env, t);
  ActionDist d;
  double total = 0.0;
  for (std::size_t k = 0; k < t.states.size(); ++k) {
    policy.distribution(env, t.states[k], d);
    total += d.logp[t.actions[k]];
  }
  return total;
}

inline double traj_log_pb(const Environment& env, const Trajectory& t) {
  validate_trajectory(env, t);
  double total = 0.0;
  for (std::size_t k = 1; k < t.states.size(); ++k) total += BackwardPolicy::log_prob(env, t.states[k]);
  return total;
}

/// Per-step log p_F of `t` under `policy` without validation (hot path).
inline void step_log_pf(const ForwardPolicy& policy, const Environment& env, const Trajectory& t, std::vector<double>& out) {
  out.resize(t.states.size());
  ActionDist d;
  for (std::size_t k = 0; k < t.states.size(); ++k) {
    policy.distribution(env, t.states[k], d);
    out[k] = d.logp[t.actions[k]];
  }
}

// ---------------------------------------------------------------- snapshots

inline constexpr int kSnapshotVersion = 1;

struct PolicySnapshot {
  std::string env_fingerprint;
  ForwardPolicy policy;
  std::string backward = BackwardPolicy::mode;
  std::map<std::string, std::string> meta;
};

namespace detail {

inline std::string encode_keys(const std::vector<StateKey>& keys) {
  std::vector<std::uint8_t> bytes;
  auto put = [&](std::int16_t v) {
    const auto u = static_cast<std::uint16_t>(v);
    bytes.push_back(static_cast<std::uint8_t>(u & 0xff));
    bytes.push_back(static_cast<std::uint8_t>(u >> 8));
  };
  for (const auto& k : keys) {
    put(static_cast<std::int16_t>(k.size()));
    for (auto c : k.code()) put(c);
  }
  return codec::base64_encode(bytes);
}

inline std::vector<StateKey> decode_keys(std::string_view text) {
  const auto bytes = codec::base64_decode(text);
  if (bytes.size() % 2) throw Error(Errc::truncated_payload, "odd key payload");
  std::vector<std::int16_t> vals(bytes.size() / 2);
  for (std::size_t i = 0; i < vals.size(); ++i)
    vals[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8)));
  std::vector<StateKey> keys;
  std::size_t pos = 0;
  while (pos < vals.size()) {
    const auto len = static_cast<std::size_t>(vals[pos++]);
    if (pos + len > vals.size()) throw Error(Errc::truncated_payload, "truncated key payload");
    keys.emplace_back(std::vector<std::int16_t>(vals.begin() + static_cast<std::ptrdiff_t>(pos),
                                                vals.begin() + static_cast<std::ptrdiff_t>(pos + len)));
    pos += len;
  }
  return keys;
}

inline std::vector<std::size_t> parse_widths(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(static_cast<std::size_t>(std::stoull(item)));
    } catch (const std::exception&) {
      throw Error(Errc::truncated_payload, "bad arch width '" + item + "'");
    }
  }
  return out;
}

}  // namespace detail

inline std::string save_snapshot(const PolicySnapshot& snap) {
  const Head& h = snap.policy.head();
  std::ostringstream os;
  os << "version = " << kSnapshotVersion << '\n';
  os << "env_fingerprint = " << snap.env_fingerprint << '\n';
  os << "backend = " << backend_name(h.backend()) << '\n';
  os << "arch = " << h.arch() << '\n';
  os << "params_b64 = " << codec::base64_encode(codec::doubles_to_le(h.params())) << '\n';
  if (h.backend() == Backend::tabular) os << "keys_b64 = " << detail::encode_keys(h.keys()) << '\n';
  os << "backward = " << snap.backward << '\n';
  for (const auto& [k, v] : snap.meta) os << "meta." << k << " = " << v << '\n';
  return os.str();
}

/// Parses a snapshot envelope without checking it against an environment.
inline PolicySnapshot parse_snapshot(std::string_view text) {
  std::map<std::string, std::string> fields;
  PolicySnapshot snap;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw Error(Errc::truncated_payload, "malformed snapshot line");
    std::string key = line.substr(0, eq), value = line.substr(eq + 3);
    if (key.rfind("meta.", 0) == 0) snap.meta[key.substr(5)] = value;
    else fields[key] = value;
  }
  auto need = [&](const char* k) -> const std::string& {
    auto it = fields.find(k);
    if (it == fields.end()) throw Error(Errc::truncated_payload, std::string("snapshot missing field ") + k);
    return it->second;
  };
  if (need("version") != std::to_string(kSnapshotVersion))
    throw Error(Errc::unknown_version, "snapshot version " + need("version"));
  snap.env_fingerprint = need("env_fingerprint");
  snap.backward = need("backward");
  if (snap.backward != BackwardPolicy::mode) throw Error(Errc::unknown_version, "backward mode " + snap.backward);
  const Backend backend = parse_backend(need("backend"));
  const std::string& arch = need("arch");
  auto params = codec::le_to_doubles(codec::base64_decode(need("params_b64")));
  const std::string prefix = std::string(backend_name(backend)) + ":";
  if (arch.rfind(prefix, 0) != 0) throw Error(Errc::architecture_mismatch, "arch does not match backend");
  const auto widths = detail::parse_widths(arch.substr(prefix.size()));
  if (backend == Backend::mlp) {
    MlpSpec spec;
    spec.widths = widths;
    try {
      spec.validate();
    } catch (const Error&) {
      throw Error(Errc::truncated_payload, "invalid mlp arch " + arch);
    }
    snap.policy = ForwardPolicy(Head::mlp_from(std::move(spec), std::move(params)));
  } else {
    if (widths.size() != 1) throw Error(Errc::truncated_payload, "invalid tabular arch " + arch);
    snap.policy = ForwardPolicy(Head::tabular_from(widths[0], detail::decode_keys(need("keys_b64")), std::move(params)));
  }
  return snap;
}

/// Parses and checks a snapshot against `env`.
inline PolicySnapshot load_snapshot(std::string_view text, const Environment& env) {
  PolicySnapshot snap = parse_snapshot(text);
  if (snap.env_fingerprint != env.fingerprint())
    throw Error(Errc::fingerprint_mismatch, "snapshot for " + snap.env_fingerprint + ", environment is " + env.fingerprint());
  const Head& h = snap.policy.head();
  if (h.output() != env.action_count()) throw Error(Errc::architecture_mismatch, "head width != action count");
  if (h.backend() == Backend::mlp && h.spec().input() != env.feature_size())
    throw Error(Errc::architecture_mismatch, "mlp input width != feature size");
  if (h.backend() == Backend::tabular)
    for (const auto& k : h.keys()) env.validate(k);
  return snap;
}

}  // namespace epgfn
