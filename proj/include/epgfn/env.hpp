#pragma once

// State DAGs, rewards and featurizations for the four environments:
// grid world, multisets, sequences and rooted phylogenetic topologies.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <deque>
#include <istream>
#include <map>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "epgfn/codec.hpp"
#include "epgfn/common.hpp"

namespace epgfn {

using ActionId = std::uint32_t;

/// Canonical encoding of an environment state. Two states are equal iff
/// their codes are identical.
class StateKey {
 public:
  StateKey() = default;
  explicit StateKey(std::vector<std::int16_t> code) : code_(std::move(code)) {}
  StateKey(std::initializer_list<std::int16_t> code) : code_(code) {}

  std::span<const std::int16_t> code() const { return code_; }
  std::size_t size() const { return code_.size(); }
  std::int16_t operator[](std::size_t i) const { return code_[i]; }

  friend bool operator==(const StateKey&, const StateKey&) = default;
  friend auto operator<=>(const StateKey&, const StateKey&) = default;

  std::string to_string() const {
    std::string out = "[";
    for (std::size_t i = 0; i < code_.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(code_[i]);
    }
    return out + "]";
  }

 private:
  std::vector<std::int16_t> code_;
};

struct StateKeyHash {
  std::size_t operator()(const StateKey& k) const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::int16_t v : k.code()) {
      h ^= static_cast<std::uint16_t>(v);
      h *= 0x100000001b3ULL;
    }
    return static_cast<std::size_t>(splitmix64(h));
  }
};

template <class T>
using StateMap = std::unordered_map<StateKey, T, StateKeyHash>;

struct Transition {
  ActionId action;
  StateKey next;  // empty for the stop action (sink s_f)
  bool is_stop;
};

struct ParentEdge {
  StateKey parent;
  ActionId action;
};

enum class EnvKind { grid, multiset, sequence, phylo };

inline const char* env_kind_name(EnvKind k) {
  switch (k) {
    case EnvKind::grid: return "grid";
    case EnvKind::multiset: return "multiset";
    case EnvKind::sequence: return "sequence";
    case EnvKind::phylo: return "phylo";
  }
  return "?";
}

inline EnvKind parse_env_kind(const std::string& s) {
  if (s == "grid") return EnvKind::grid;
  if (s == "multiset") return EnvKind::multiset;
  if (s == "sequence") return EnvKind::sequence;
  if (s == "phylo") return EnvKind::phylo;
  throw Error(Errc::invalid_config, "unknown environment kind '" + s + "'");
}

/// Nucleobase matrix, one row per leaf. Entries index {A, C, G, T}.
struct SiteData {
  int leaves = 0;
  int sites = 0;
  std::vector<std::uint8_t> bases;  // row-major, leaves x sites

  std::uint8_t at(int leaf, int site) const {
    return bases[static_cast<std::size_t>(leaf) * static_cast<std::size_t>(sites) + static_cast<std::size_t>(site)];
  }
  std::vector<std::uint8_t> column(int site) const {
    std::vector<std::uint8_t> col(static_cast<std::size_t>(leaves));
    for (int l = 0; l < leaves; ++l) col[static_cast<std::size_t>(l)] = at(l, site);
    return col;
  }
  void validate() const {
    if (leaves < 1 || sites < 1) throw Error(Errc::invalid_config, "site matrix must be non-empty");
    if (bases.size() != static_cast<std::size_t>(leaves) * static_cast<std::size_t>(sites))
      throw Error(Errc::shape_mismatch, "site matrix size mismatch");
    for (auto b : bases)
      if (b > 3) throw Error(Errc::invalid_config, "nucleobase index outside {0,1,2,3}");
  }
};

inline void write_sites(std::ostream& os, const SiteData& data) {
  static constexpr char kBase[] = "ACGT";
  for (int l = 0; l < data.leaves; ++l) {
    for (int s = 0; s < data.sites; ++s) os << kBase[data.at(l, s)];
    os << '\n';
  }
}

inline SiteData read_sites(std::istream& is) {
  SiteData data;
  std::string line;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty()) continue;
    if (data.leaves == 0) data.sites = static_cast<int>(line.size());
    if (static_cast<int>(line.size()) != data.sites) throw Error(Errc::shape_mismatch, "ragged site matrix");
    for (char c : line) {
      switch (c) {
        case 'A': data.bases.push_back(0); break;
        case 'C': data.bases.push_back(1); break;
        case 'G': data.bases.push_back(2); break;
        case 'T': data.bases.push_back(3); break;
        default: throw Error(Errc::invalid_config, std::string("invalid nucleotide '") + c + "'");
      }
    }
    ++data.leaves;
  }
  data.validate();
  return data;
}

struct GridConfig {
  int size = 9;
  std::vector<std::pair<int, int>> beacons;
  double kappa = 1.0;
  double delta = 2.0;
};

struct MultisetConfig {
  int dict_size = 10;
  int target_size = 8;
  std::vector<double> values;  // r_u
};

struct SequenceConfig {
  int max_len = 6;
  int num_tokens = 6;
  std::vector<double> position_scores;  // p_i, length max_len
  std::vector<double> token_scores;     // t_u, length num_tokens
};

struct PhyloConfig {
  int leaves = 5;
  SiteData data;
  double branch_length = 0.1;
  double mu = 1.0;
  double gamma = 2.0;
  int clients = 1;  // prior exponent is 1/clients
};

struct EnvConfig {
  EnvKind kind = EnvKind::grid;
  GridConfig grid;
  MultisetConfig multiset;
  SequenceConfig sequence;
  PhyloConfig phylo;

  void validate() const {
    auto all_finite = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    switch (kind) {
      case EnvKind::grid:
        if (grid.size < 2) throw Error(Errc::invalid_config, "grid side must be >= 2");
        for (auto [x, y] : grid.beacons)
          if (x < 0 || y < 0 || x >= grid.size || y >= grid.size)
            throw Error(Errc::invalid_config, "beacon outside grid");
        if (grid.beacons.empty()) throw Error(Errc::invalid_config, "grid needs at least one beacon");
        if (!std::isfinite(grid.kappa) || !std::isfinite(grid.delta)) throw Error(Errc::invalid_config, "grid constants must be finite");
        break;
      case EnvKind::multiset:
        if (multiset.target_size < 1 || multiset.dict_size < 1) throw Error(Errc::invalid_config, "multiset sizes must be >= 1");
        if (static_cast<int>(multiset.values.size()) != multiset.dict_size)
          throw Error(Errc::invalid_config, "multiset values must have dict_size entries");
        if (!all_finite(multiset.values)) throw Error(Errc::invalid_config, "multiset values must be finite");
        break;
      case EnvKind::sequence:
        if (sequence.max_len < 1 || sequence.num_tokens < 1) throw Error(Errc::invalid_config, "sequence sizes must be >= 1");
        if (static_cast<int>(sequence.position_scores.size()) != sequence.max_len ||
            static_cast<int>(sequence.token_scores.size()) != sequence.num_tokens)
          throw Error(Errc::invalid_config, "sequence score vectors have wrong length");
        if (!all_finite(sequence.position_scores) || !all_finite(sequence.token_scores))
          throw Error(Errc::invalid_config, "sequence scores must be finite");
        break;
      case EnvKind::phylo:
        if (phylo.leaves < 3) throw Error(Errc::invalid_config, "phylo needs >= 3 leaves");
        if (!(phylo.branch_length > 0) || !(phylo.mu > 0) || !(phylo.gamma > 0))
          throw Error(Errc::invalid_config, "phylo b, mu, gamma must be > 0");
        if (phylo.clients < 1) throw Error(Errc::invalid_config, "phylo clients must be >= 1");
        phylo.data.validate();
        if (phylo.data.leaves != phylo.leaves) throw Error(Errc::shape_mismatch, "site matrix rows != leaves");
        break;
    }
  }

  /// Canonical description of the state DAG (reward parameters excluded).
  std::string structure_string() const {
    std::ostringstream os;
    os << env_kind_name(kind) << ';';
    switch (kind) {
      case EnvKind::grid: os << "size=" << grid.size; break;
      case EnvKind::multiset: os << "dict=" << multiset.dict_size << ";target=" << multiset.target_size; break;
      case EnvKind::sequence: os << "len=" << sequence.max_len << ";tokens=" << sequence.num_tokens; break;
      case EnvKind::phylo: os << "leaves=" << phylo.leaves; break;
    }
    return os.str();
  }
};

class Environment {
 public:
  virtual ~Environment() = default;

  virtual const EnvConfig& config() const = 0;
  EnvKind kind() const { return config().kind; }

  virtual StateKey initial_state() const = 0;
  /// Output arity including the stop action, which is always the last id.
  virtual std::size_t action_count() const = 0;
  ActionId stop_action() const { return static_cast<ActionId>(action_count() - 1); }

  /// Legal actions of a (trusted) state, ascending, stop last when legal.
  virtual void legal_actions(const StateKey& s, std::vector<ActionId>& out) const = 0;
  /// Successor of a (trusted) state under a legal non-stop action.
  virtual StateKey apply(const StateKey& s, ActionId a) const = 0;
  virtual std::vector<ParentEdge> parent_edges(const StateKey& s) const = 0;
  virtual bool is_terminal(const StateKey& s) const = 0;
  virtual void validate(const StateKey& s) const = 0;
  virtual double log_reward(const StateKey& x) const = 0;

  virtual std::size_t feature_size() const = 0;
  virtual std::vector<double> featurize(const StateKey& s) const = 0;

  virtual bool all_states_terminal() const = 0;
  virtual std::size_t max_trajectory_length() const = 0;
  virtual double estimated_state_count() const = 0;

  std::vector<Transition> children(const StateKey& s) const {
    validate(s);
    std::vector<ActionId> acts;
    legal_actions(s, acts);
    std::vector<Transition> out;
    out.reserve(acts.size());
    for (ActionId a : acts) {
      if (a == stop_action()) out.push_back({a, StateKey{}, true});
      else out.push_back({a, apply(s, a), false});
    }
    return out;
  }

  std::vector<ParentEdge> parents(const StateKey& s) const {
    validate(s);
    if (s == initial_state()) throw Error(Errc::no_parents, "initial state has no parents");
    return parent_edges(s);
  }

  virtual std::size_t parent_count(const StateKey& s) const { return parent_edges(s).size(); }

  std::string fingerprint() const {
    return std::string(env_kind_name(kind())) + "-" + codec::sha256_hex(config().structure_string(), 16);
  }
};

using EnvPtr = std::shared_ptr<const Environment>;

namespace detail {

inline void check_terminal(const Environment& env, const StateKey& x) {
  if (!env.is_terminal(x)) throw Error(Errc::not_terminal, "state " + x.to_string() + " is not terminal");
}

inline double log_sigmoid(double z) {
  return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

}  // namespace detail

// ---------------------------------------------------------------- grid

class GridEnv final : public Environment {
 public:
  enum : ActionId { kRight = 0, kUp = 1, kStop = 2 };

  explicit GridEnv(EnvConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const EnvConfig& config() const override { return cfg_; }
  StateKey initial_state() const override { return StateKey{0, 0}; }
  std::size_t action_count() const override { return 3; }

  void legal_actions(const StateKey& s, std::vector<ActionId>& out) const override {
    out.clear();
    const int n = cfg_.grid.size;
    if (s[0] + 1 < n) out.push_back(kRight);
    if (s[1] + 1 < n) out.push_back(kUp);
    out.push_back(kStop);
  }
  StateKey apply(const StateKey& s, ActionId a) const override {
    return a == kRight ? StateKey{static_cast<std::int16_t>(s[0] + 1), s[1]}
                       : StateKey{s[0], static_cast<std::int16_t>(s[1] + 1)};
  }
  std::vector<ParentEdge> parent_edges(const StateKey& s) const override {
    std::vector<ParentEdge> out;
    if (s[0] > 0) out.push_back({StateKey{static_cast<std::int16_t>(s[0] - 1), s[1]}, kRight});
    if (s[1] > 0) out.push_back({StateKey{s[0], static_cast<std::int16_t>(s[1] - 1)}, kUp});
    return out;
  }
  std::size_t parent_count(const StateKey& s) const override {
    return static_cast<std::size_t>(s[0] > 0) + static_cast<std::size_t>(s[1] > 0);
  }
  bool is_terminal(const StateKey&) const override { return true; }
  void validate(const StateKey& s) const override {
    if (s.size() != 2 || s[0] < 0 || s[1] < 0 || s[0] >= cfg_.grid.size || s[1] >= cfg_.grid.size)
      throw Error(Errc::malformed_state, "bad grid state " + s.to_string());
  }
  double log_reward(const StateKey& x) const override {
    validate(x);
    double dmin = std::numeric_limits<double>::infinity();
    for (auto [bx, by] : cfg_.grid.beacons)
      dmin = std::min(dmin, std::hypot(static_cast<double>(x[0] - bx), static_cast<double>(x[1] - by)));
    return detail::log_sigmoid(cfg_.grid.kappa * (cfg_.grid.delta - dmin));
  }
  std::size_t feature_size() const override { return 2; }
  std::vector<double> featurize(const StateKey& s) const override {
    const double n = cfg_.grid.size;
    return {s[0] / n, s[1] / n};
  }
  bool all_states_terminal() const override { return true; }
  std::size_t max_trajectory_length() const override { return 2 * static_cast<std::size_t>(cfg_.grid.size - 1) + 1; }
  double estimated_state_count() const override { return static_cast<double>(cfg_.grid.size) * cfg_.grid.size; }

 private:
  EnvConfig cfg_;
};

// ---------------------------------------------------------------- multiset

class MultisetEnv final : public Environment {
 public:
  explicit MultisetEnv(EnvConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const EnvConfig& config() const override { return cfg_; }
  StateKey initial_state() const override {
    return StateKey(std::vector<std::int16_t>(static_cast<std::size_t>(cfg_.multiset.dict_size), 0));
  }
  std::size_t action_count() const override { return static_cast<std::size_t>(cfg_.multiset.dict_size) + 1; }

  void legal_actions(const StateKey& s, std::vector<ActionId>& out) const override {
    out.clear();
    if (total(s) == cfg_.multiset.target_size) {
      out.push_back(stop_action());
      return;
    }
    for (int u = 0; u < cfg_.multiset.dict_size; ++u) out.push_back(static_cast<ActionId>(u));
  }
  StateKey apply(const StateKey& s, ActionId a) const override {
    std::vector<std::int16_t> c(s.code().begin(), s.code().end());
    ++c[a];
    return StateKey(std::move(c));
  }
  std::vector<ParentEdge> parent_edges(const StateKey& s) const override {
    std::vector<ParentEdge> out;
    for (std::size_t u = 0; u < s.size(); ++u) {
      if (s[u] == 0) continue;
      std::vector<std::int16_t> c(s.code().begin(), s.code().end());
      --c[u];
      out.push_back({StateKey(std::move(c)), static_cast<ActionId>(u)});
    }
    return out;
  }
  std::size_t parent_count(const StateKey& s) const override {
    return static_cast<std::size_t>(std::count_if(s.code().begin(), s.code().end(), [](auto c) { return c > 0; }));
  }
  bool is_terminal(const StateKey& s) const override { return total(s) == cfg_.multiset.target_size; }
  void validate(const StateKey& s) const override {
    if (static_cast<int>(s.size()) != cfg_.multiset.dict_size)
      throw Error(Errc::malformed_state, "bad multiset state " + s.to_string());
    int t = 0;
    for (auto c : s.code()) {
      if (c < 0) throw Error(Errc::malformed_state, "negative count in " + s.to_string());
      t += c;
    }
    if (t > cfg_.multiset.target_size) throw Error(Errc::malformed_state, "multiset larger than target " + s.to_string());
  }
  double log_reward(const StateKey& x) const override {
    validate(x);
    detail::check_terminal(*this, x);
    double r = 0.0;
    for (std::size_t u = 0; u < x.size(); ++u) r += x[u] * cfg_.multiset.values[u];
    return r;
  }
  std::size_t feature_size() const override { return static_cast<std::size_t>(cfg_.multiset.dict_size); }
  std::vector<double> featurize(const StateKey& s) const override {
    std::vector<double> f(s.size());
    for (std::size_t u = 0; u < s.size(); ++u) f[u] = static_cast<double>(s[u]) / cfg_.multiset.target_size;
    return f;
  }
  bool all_states_terminal() const override { return false; }
  std::size_t max_trajectory_length() const override { return static_cast<std::size_t>(cfg_.multiset.target_size) + 1; }
  double estimated_state_count() const override {
    // C(S + U, U) by stars and bars
    const int u = cfg_.multiset.dict_size, s = cfg_.multiset.target_size;
    double c = 1.0;
    for (int i = 1; i <= u; ++i) c = c * (s + i) / i;
    return c;
  }

 private:
  static int total(const StateKey& s) {
    int t = 0;
    for (auto c : s.code()) t += c;
    return t;
  }
  EnvConfig cfg_;
};

// ---------------------------------------------------------------- sequence

class SequenceEnv final : public Environment {
 public:
  explicit SequenceEnv(EnvConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const EnvConfig& config() const override { return cfg_; }
  StateKey initial_state() const override { return StateKey{}; }
  std::size_t action_count() const override { return static_cast<std::size_t>(cfg_.sequence.num_tokens) + 1; }

  void legal_actions(const StateKey& s, std::vector<ActionId>& out) const override {
    out.clear();
    if (static_cast<int>(s.size()) < cfg_.sequence.max_len)
      for (int u = 0; u < cfg_.sequence.num_tokens; ++u) out.push_back(static_cast<ActionId>(u));
    out.push_back(stop_action());
  }
  StateKey apply(const StateKey& s, ActionId a) const override {
    std::vector<std::int16_t> c(s.code().begin(), s.code().end());
    c.push_back(static_cast<std::int16_t>(a));
    return StateKey(std::move(c));
  }
  std::vector<ParentEdge> parent_edges(const StateKey& s) const override {
    std::vector<std::int16_t> c(s.code().begin(), s.code().end() - 1);
    return {{StateKey(std::move(c)), static_cast<ActionId>(s[s.size() - 1])}};
  }
  std::size_t parent_count(const StateKey& s) const override { return s.size() == 0 ? 0 : 1; }
  bool is_terminal(const StateKey&) const override { return true; }
  void validate(const StateKey& s) const override {
    if (static_cast<int>(s.size()) > cfg_.sequence.max_len)
      throw Error(Errc::malformed_state, "sequence too long " + s.to_string());
    for (auto t : s.code())
      if (t < 0 || t >= cfg_.sequence.num_tokens) throw Error(Errc::malformed_state, "bad token in " + s.to_string());
  }
  double log_reward(const StateKey& x) const override {
    validate(x);
    double r = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
      r += cfg_.sequence.position_scores[i] * cfg_.sequence.token_scores[static_cast<std::size_t>(x[i])];
    return r;
  }
  std::size_t feature_size() const override {
    return static_cast<std::size_t>(cfg_.sequence.max_len) * static_cast<std::size_t>(cfg_.sequence.num_tokens + 1) + 1;
  }
  std::vector<double> featurize(const StateKey& s) const override {
    const std::size_t width = static_cast<std::size_t>(cfg_.sequence.num_tokens) + 1;
    const std::size_t blank = width - 1;
    std::vector<double> f(feature_size(), 0.0);
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg_.sequence.max_len); ++i) {
      const std::size_t tok = i < s.size() ? static_cast<std::size_t>(s[i]) : blank;
      f[i * width + tok] = 1.0;
    }
    f.back() = static_cast<double>(s.size()) / cfg_.sequence.max_len;
    return f;
  }
  bool all_states_terminal() const override { return true; }
  std::size_t max_trajectory_length() const override { return static_cast<std::size_t>(cfg_.sequence.max_len) + 1; }
  double estimated_state_count() const override {
    double total = 0.0, p = 1.0;
    for (int k = 0; k <= cfg_.sequence.max_len; ++k, p *= cfg_.sequence.num_tokens) total += p;
    return total;
  }

 private:
  EnvConfig cfg_;
};

// ---------------------------------------------------------------- phylogenetics

namespace phylo {

inline constexpr std::int16_t kInternal = -1;

/// End (exclusive) of the subtree whose prefix code starts at `pos`.
inline std::size_t subtree_end(std::span<const std::int16_t> code, std::size_t pos) {
  if (pos >= code.size()) throw Error(Errc::malformed_state, "truncated tree code");
  if (code[pos] >= 0) return pos + 1;
  if (code[pos] != kInternal) throw Error(Errc::malformed_state, "bad tree symbol");
  return subtree_end(code, subtree_end(code, pos + 1));
}

using Code = std::vector<std::int16_t>;

/// Joins two canonical trees under a new root, children ordered canonically.
inline Code join(const Code& a, const Code& b) {
  Code out;
  out.reserve(a.size() + b.size() + 1);
  out.push_back(kInternal);
  const bool a_first = std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
  const Code& lo = a_first ? a : b;
  const Code& hi = a_first ? b : a;
  out.insert(out.end(), lo.begin(), lo.end());
  out.insert(out.end(), hi.begin(), hi.end());
  return out;
}

/// Recursively sorts child encodings; idempotent.
inline Code canonical_tree(std::span<const std::int16_t> code) {
  if (code.size() == 1) return Code{code[0]};
  const std::size_t mid = subtree_end(code, 1);
  return join(canonical_tree(code.subspan(1, mid - 1)), canonical_tree(code.subspan(mid)));
}

inline std::vector<Code> split_forest(std::span<const std::int16_t> code) {
  std::vector<Code> trees;
  std::size_t pos = 0;
  while (pos < code.size()) {
    const std::size_t end = subtree_end(code, pos);
    trees.emplace_back(code.begin() + static_cast<std::ptrdiff_t>(pos), code.begin() + static_cast<std::ptrdiff_t>(end));
    pos = end;
  }
  return trees;
}

inline StateKey forest_key(std::vector<Code> trees) {
  for (auto& t : trees) t = canonical_tree(t);
  std::sort(trees.begin(), trees.end());
  Code out;
  for (const auto& t : trees) out.insert(out.end(), t.begin(), t.end());
  return StateKey(std::move(out));
}

/// Pair (i < j) of canonical tree positions → action id (colex order).
inline ActionId pair_action(std::size_t i, std::size_t j) { return static_cast<ActionId>(j * (j - 1) / 2 + i); }

inline std::pair<std::size_t, std::size_t> action_pair(ActionId a) {
  std::size_t j = 1;
  while ((j + 1) * j / 2 <= a) ++j;
  return {a - j * (j - 1) / 2, j};
}

/// Post-order node arrays of a rooted binary tree.
struct Tree {
  std::vector<int> left, right, leaf;  // leaf[i] = id or -1
  int root = -1;
};

inline int build_tree(std::span<const std::int16_t> code, std::size_t& pos, Tree& t) {
  if (pos >= code.size()) throw Error(Errc::malformed_state, "truncated tree code");
  const std::int16_t sym = code[pos++];
  int l = -1, r = -1, lf = -1;
  if (sym >= 0) {
    lf = sym;
  } else {
    if (sym != kInternal) throw Error(Errc::malformed_state, "bad tree symbol");
    l = build_tree(code, pos, t);
    r = build_tree(code, pos, t);
  }
  t.left.push_back(l);
  t.right.push_back(r);
  t.leaf.push_back(lf);
  return static_cast<int>(t.left.size()) - 1;
}

inline Tree parse_tree(std::span<const std::int16_t> code) {
  Tree t;
  std::size_t pos = 0;
  t.root = build_tree(code, pos, t);
  if (pos != code.size()) throw Error(Errc::malformed_state, "trailing symbols after tree");
  return t;
}

struct Jc69 {
  double p_same, p_diff;
  static Jc69 make(double branch_length, double mu) {
    const double e = std::exp(-mu * branch_length);
    return {0.25 + 0.75 * e, 0.25 - 0.25 * e};
  }
};

/// Distinct site columns with multiplicities.
struct SitePatterns {
  int leaves = 0;
  std::vector<std::vector<std::uint8_t>> columns;
  std::vector<double> counts;

  static SitePatterns from(const SiteData& data) {
    SitePatterns p;
    p.leaves = data.leaves;
    std::map<std::vector<std::uint8_t>, double> tally;
    for (int s = 0; s < data.sites; ++s) tally[data.column(s)] += 1.0;
    for (auto& [col, n] : tally) {
      p.columns.push_back(col);
      p.counts.push_back(n);
    }
    return p;
  }
};

/// log(P_root(site | T)^T pi) with uniform root prior; partials rescaled per node.
inline double site_loglik(const Tree& tree, std::span<const std::uint8_t> site, const Jc69& m) {
  const std::size_t n = tree.left.size();
  std::vector<std::array<double, 4>> part(n);
  std::vector<double> scale(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {  // build order is post-order
    if (tree.leaf[i] >= 0) {
      const auto leaf = static_cast<std::size_t>(tree.leaf[i]);
      if (leaf >= site.size()) throw Error(Errc::malformed_state, "leaf id outside site column");
      part[i] = {0, 0, 0, 0};
      part[i][site[leaf]] = 1.0;
      continue;
    }
    std::array<double, 4> acc{1, 1, 1, 1};
    for (int child : {tree.left[i], tree.right[i]}) {
      const auto& c = part[static_cast<std::size_t>(child)];
      const double sum = c[0] + c[1] + c[2] + c[3];
      for (int k = 0; k < 4; ++k) acc[k] *= m.p_diff * sum + (m.p_same - m.p_diff) * c[k];
      scale[i] += scale[static_cast<std::size_t>(child)];
    }
    const double mx = std::max(std::max(acc[0], acc[1]), std::max(acc[2], acc[3]));
    for (auto& a : acc) a /= mx;
    scale[i] += std::log(mx);
    part[i] = acc;
  }
  const auto r = static_cast<std::size_t>(tree.root);
  const auto& p = part[r];
  return std::log(0.25 * (p[0] + p[1] + p[2] + p[3])) + scale[r];
}

/// Number of rooted binary topologies over n labelled leaves, (2n-3)!!.
inline double topology_count(int n) {
  double c = 1.0;
  for (int k = 3; k <= 2 * n - 3; k += 2) c *= k;
  return c;
}

inline double forest_count(int n) {
  std::vector<double> f(static_cast<std::size_t>(n) + 1, 0.0);
  f[0] = 1.0;
  for (int m = 1; m <= n; ++m) {
    double binom = 1.0;  // C(m-1, k-1)
    for (int k = 1; k <= m; ++k) {
      f[static_cast<std::size_t>(m)] += binom * topology_count(k) * f[static_cast<std::size_t>(m - k)];
      binom = binom * (m - k) / k;
    }
  }
  return f[static_cast<std::size_t>(n)];
}

}  // namespace phylo

class PhyloEnv final : public Environment {
 public:
  explicit PhyloEnv(EnvConfig cfg)
      : cfg_(std::move(cfg)),
        patterns_((cfg_.validate(), phylo::SitePatterns::from(cfg_.phylo.data))),
        model_(phylo::Jc69::make(cfg_.phylo.branch_length, cfg_.phylo.mu)) {}

  const EnvConfig& config() const override { return cfg_; }
  StateKey initial_state() const override {
    std::vector<std::int16_t> c(static_cast<std::size_t>(cfg_.phylo.leaves));
    std::iota(c.begin(), c.end(), std::int16_t{0});
    return StateKey(std::move(c));
  }
  std::size_t action_count() const override {
    const auto n = static_cast<std::size_t>(cfg_.phylo.leaves);
    return n * (n - 1) / 2 + 1;
  }

  void legal_actions(const StateKey& s, std::vector<ActionId>& out) const override {
    out.clear();
    const std::size_t k = tree_count(s);
    if (k == 1) {
      out.push_back(stop_action());
      return;
    }
    for (ActionId a = 0; a < k * (k - 1) / 2; ++a) out.push_back(a);
  }
  StateKey apply(const StateKey& s, ActionId a) const override {
    auto trees = phylo::split_forest(s.code());
    auto [i, j] = phylo::action_pair(a);
    phylo::Code joined = phylo::join(trees[i], trees[j]);
    trees.erase(trees.begin() + static_cast<std::ptrdiff_t>(j));
    trees[i] = std::move(joined);
    std::sort(trees.begin(), trees.end());
    phylo::Code out;
    for (const auto& t : trees) out.insert(out.end(), t.begin(), t.end());
    return StateKey(std::move(out));
  }
  std::vector<ParentEdge> parent_edges(const StateKey& s) const override {
    const auto trees = phylo::split_forest(s.code());
    std::vector<ParentEdge> out;
    for (std::size_t t = 0; t < trees.size(); ++t) {
      const auto& tree = trees[t];
      if (tree.size() == 1) continue;
      const std::size_t mid = phylo::subtree_end(tree, 1);
      phylo::Code left(tree.begin() + 1, tree.begin() + static_cast<std::ptrdiff_t>(mid));
      phylo::Code right(tree.begin() + static_cast<std::ptrdiff_t>(mid), tree.end());
      std::vector<phylo::Code> parent;
      for (std::size_t u = 0; u < trees.size(); ++u)
        if (u != t) parent.push_back(trees[u]);
      parent.push_back(left);
      parent.push_back(right);
      std::sort(parent.begin(), parent.end());
      const auto i = static_cast<std::size_t>(std::find(parent.begin(), parent.end(), left) - parent.begin());
      const auto j = static_cast<std::size_t>(std::find(parent.begin(), parent.end(), right) - parent.begin());
      phylo::Code code;
      for (const auto& p : parent) code.insert(code.end(), p.begin(), p.end());
      out.push_back({StateKey(std::move(code)), phylo::pair_action(std::min(i, j), std::max(i, j))});
    }
    return out;
  }
  std::size_t parent_count(const StateKey& s) const override {
    // one parent per tree with an internal root
    std::size_t count = 0, pos = 0;
    const auto code = s.code();
    while (pos < code.size()) {
      const std::size_t end = phylo::subtree_end(code, pos);
      if (end - pos > 1) ++count;
      pos = end;
    }
    return count;
  }
  bool is_terminal(const StateKey& s) const override { return tree_count(s) == 1; }
  void validate(const StateKey& s) const override {
    std::vector<phylo::Code> trees;
    try {
      trees = phylo::split_forest(s.code());
    } catch (const Error&) {
      throw Error(Errc::malformed_state, "bad forest code " + s.to_string());
    }
    std::vector<int> seen(static_cast<std::size_t>(cfg_.phylo.leaves), 0);
    for (const auto& t : trees) {
      if (phylo::canonical_tree(t) != t) throw Error(Errc::malformed_state, "non-canonical tree in " + s.to_string());
      for (auto v : t) {
        if (v >= cfg_.phylo.leaves) throw Error(Errc::malformed_state, "leaf id out of range in " + s.to_string());
        if (v >= 0) ++seen[static_cast<std::size_t>(v)];
      }
    }
    if (!std::is_sorted(trees.begin(), trees.end()) ||
        std::any_of(seen.begin(), seen.end(), [](int c) { return c != 1; }))
      throw Error(Errc::malformed_state, "forest is not a canonical leaf partition " + s.to_string());
  }
  double log_reward(const StateKey& x) const override {
    validate(x);
    detail::check_terminal(*this, x);
    return cfg_.phylo.gamma * log_likelihood(x) - std::log(phylo::topology_count(cfg_.phylo.leaves)) / cfg_.phylo.clients;
  }
  /// Untempered log-likelihood of all sites under a complete topology.
  double log_likelihood(const StateKey& topology) const {
    const auto tree = phylo::parse_tree(topology.code());
    double ll = 0.0;
    for (std::size_t p = 0; p < patterns_.columns.size(); ++p)
      ll += patterns_.counts[p] * phylo::site_loglik(tree, patterns_.columns[p], model_);
    return ll;
  }
  std::size_t feature_size() const override { return 0; }
  std::vector<double> featurize(const StateKey&) const override {
    throw Error(Errc::unsupported_featurization, "phylogenetic states use the tabular backend");
  }
  bool all_states_terminal() const override { return false; }
  std::size_t max_trajectory_length() const override { return static_cast<std::size_t>(cfg_.phylo.leaves); }
  double estimated_state_count() const override { return phylo::forest_count(cfg_.phylo.leaves); }

 private:
  static std::size_t tree_count(const StateKey& s) {
    std::size_t k = 0, pos = 0;
    while (pos < s.size()) {
      pos = phylo::subtree_end(s.code(), pos);
      ++k;
    }
    return k;
  }

  EnvConfig cfg_;
  phylo::SitePatterns patterns_;
  phylo::Jc69 model_;
};

inline EnvPtr make_environment(const EnvConfig& cfg) {
  switch (cfg.kind) {
    case EnvKind::grid: return std::make_shared<GridEnv>(cfg);
    case EnvKind::multiset: return std::make_shared<MultisetEnv>(cfg);
    case EnvKind::sequence: return std::make_shared<SequenceEnv>(cfg);
    case EnvKind::phylo: return std::make_shared<PhyloEnv>(cfg);
  }
  throw Error(Errc::invalid_config, "unknown environment kind");
}

/// Site log-likelihood of a single rooted tree; leaf ids index into `site`.
inline double jc69_site_loglik(const PhyloConfig& cfg, const StateKey& topology, std::span<const std::uint8_t> site) {
  const auto tree = phylo::parse_tree(topology.code());
  return phylo::site_loglik(tree, site, phylo::Jc69::make(cfg.branch_length, cfg.mu));
}

/// Uniformly random joining history over `leaves` leaves.
inline StateKey random_topology(int leaves, Rng& rng) {
  std::vector<phylo::Code> trees;
  for (int l = 0; l < leaves; ++l) trees.push_back({static_cast<std::int16_t>(l)});
  while (trees.size() > 1) {
    const std::size_t i = uniform_index(rng, trees.size());
    std::size_t j = uniform_index(rng, trees.size() - 1);
    if (j >= i) ++j;
    phylo::Code joined = phylo::join(trees[i], trees[j]);
    trees.erase(trees.begin() + static_cast<std::ptrdiff_t>(std::max(i, j)));
    trees[std::min(i, j)] = std::move(joined);
  }
  return phylo::forest_key(std::move(trees));
}

/// Root-down JC69 simulation of `sites` columns on a complete topology.
inline SiteData simulate_sites(const PhyloConfig& cfg, const StateKey& truth, int sites, Rng& rng) {
  const auto tree = phylo::parse_tree(truth.code());
  const auto m = phylo::Jc69::make(cfg.branch_length, cfg.mu);
  int leaves = 0;
  for (int id : tree.leaf) leaves = std::max(leaves, id + 1);
  SiteData data;
  data.leaves = leaves;
  data.sites = sites;
  data.bases.assign(static_cast<std::size_t>(leaves) * static_cast<std::size_t>(sites), 0);
  std::vector<std::uint8_t> state(tree.left.size());
  for (int s = 0; s < sites; ++s) {
    // post-order storage: the root is last, children precede parents
    for (int i = static_cast<int>(tree.left.size()) - 1; i >= 0; --i) {
      const auto ui = static_cast<std::size_t>(i);
      if (i == tree.root) state[ui] = static_cast<std::uint8_t>(uniform_index(rng, 4));
      if (tree.leaf[ui] >= 0) {
        data.bases[static_cast<std::size_t>(tree.leaf[ui]) * static_cast<std::size_t>(sites) + static_cast<std::size_t>(s)] = state[ui];
        continue;
      }
      for (int child : {tree.left[ui], tree.right[ui]}) {
        std::uint8_t b = state[ui];
        if (uniform01(rng) >= m.p_same) b = static_cast<std::uint8_t>((b + 1 + uniform_index(rng, 3)) % 4);
        state[static_cast<std::size_t>(child)] = b;
      }
    }
  }
  return data;
}

enum class ShardMode { contiguous, random };

/// Partitions columns into n shards; each shard's reward uses prior exponent 1/n.
inline std::vector<EnvConfig> split_sites(const EnvConfig& base, const SiteData& data, int n,
                                          ShardMode mode = ShardMode::contiguous, std::uint64_t seed = 0) {
  if (n < 1 || data.sites < n) throw Error(Errc::shard, "need at least one site per shard");
  std::vector<int> order(static_cast<std::size_t>(data.sites));
  std::iota(order.begin(), order.end(), 0);
  if (mode == ShardMode::random) {
    Rng rng(seed);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  }
  std::vector<EnvConfig> out;
  int start = 0;
  for (int k = 0; k < n; ++k) {
    const int len = data.sites / n + (k < data.sites % n ? 1 : 0);
    EnvConfig cfg = base;
    cfg.kind = EnvKind::phylo;
    cfg.phylo.clients = n;
    cfg.phylo.leaves = data.leaves;
    SiteData shard;
    shard.leaves = data.leaves;
    shard.sites = len;
    shard.bases.resize(static_cast<std::size_t>(data.leaves) * static_cast<std::size_t>(len));
    for (int l = 0; l < data.leaves; ++l)
      for (int c = 0; c < len; ++c)
        shard.bases[static_cast<std::size_t>(l) * static_cast<std::size_t>(len) + static_cast<std::size_t>(c)] =
            data.at(l, order[static_cast<std::size_t>(start + c)]);
    cfg.phylo.data = std::move(shard);
    out.push_back(std::move(cfg));
    start += len;
  }
  return out;
}

// ---------------------------------------------------------------- enumeration

struct StateSpace {
  std::vector<StateKey> states;  // topological order, initial state first
  StateMap<std::size_t> index;
  std::vector<char> terminal;
  std::vector<std::size_t> terminals;
};

inline constexpr double kDefaultStateGuard = 5e6;

inline StateSpace enumerate_states(const Environment& env, double guard = kDefaultStateGuard) {
  if (env.estimated_state_count() > guard)
    throw Error(Errc::enumeration_too_large, "estimated " + std::to_string(env.estimated_state_count()) + " states");
  std::vector<StateKey> found;
  StateMap<std::size_t> idx;
  std::vector<std::vector<std::size_t>> succ;
  std::deque<std::size_t> queue;
  auto intern = [&](StateKey s) {
    auto [it, inserted] = idx.try_emplace(s, found.size());
    if (inserted) {
      if (static_cast<double>(found.size()) >= guard) throw Error(Errc::enumeration_too_large, "state guard exceeded");
      found.push_back(std::move(s));
      succ.emplace_back();
      queue.push_back(it->second);
    }
    return it->second;
  };
  intern(env.initial_state());
  std::vector<ActionId> acts;
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    env.legal_actions(found[i], acts);
    for (ActionId a : acts) {
      if (a == env.stop_action()) continue;
      const std::size_t j = intern(env.apply(found[i], a));
      succ[i].push_back(j);
    }
  }
  // Kahn's algorithm
  std::vector<std::size_t> indeg(found.size(), 0);
  for (const auto& s : succ)
    for (auto j : s) ++indeg[j];
  std::vector<std::size_t> order;
  order.reserve(found.size());
  std::deque<std::size_t> ready;
  for (std::size_t i = 0; i < found.size(); ++i)
    if (indeg[i] == 0) ready.push_back(i);
  while (!ready.empty()) {
    const std::size_t i = ready.front();
    ready.pop_front();
    order.push_back(i);
    for (auto j : succ[i])
      if (--indeg[j] == 0) ready.push_back(j);
  }
  if (order.size() != found.size()) throw Error(Errc::env_integrity, "state graph has a cycle");
  StateSpace space;
  space.states.reserve(found.size());
  for (auto i : order) space.states.push_back(std::move(found[i]));
  for (std::size_t i = 0; i < space.states.size(); ++i) {
    space.index.emplace(space.states[i], i);
    const bool term = env.is_terminal(space.states[i]);
    space.terminal.push_back(term ? 1 : 0);
    if (term) space.terminals.push_back(i);
  }
  return space;
}

}  // namespace epgfn
