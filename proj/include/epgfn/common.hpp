#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace epgfn {

enum class Errc {
  malformed_state,
  no_parents,
  not_terminal,
  shard,
  unsupported_featurization,
  enumeration_too_large,
  dimension_mismatch,
  non_finite,
  env_integrity,
  fingerprint_mismatch,
  unknown_version,
  truncated_payload,
  reward_support,
  unsupported_loss,
  invalid_batch,
  no_snapshots,
  architecture_mismatch,
  unsupported_env,
  shape_mismatch,
  guard_exceeded,
  invalid_config,
  io,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::malformed_state: return "malformed-state";
    case Errc::no_parents: return "no-parents";
    case Errc::not_terminal: return "not-terminal";
    case Errc::shard: return "shard";
    case Errc::unsupported_featurization: return "unsupported-featurization";
    case Errc::enumeration_too_large: return "enumeration-too-large";
    case Errc::dimension_mismatch: return "dimension-mismatch";
    case Errc::non_finite: return "non-finite";
    case Errc::env_integrity: return "env-integrity";
    case Errc::fingerprint_mismatch: return "fingerprint-mismatch";
    case Errc::unknown_version: return "unknown-version";
    case Errc::truncated_payload: return "truncated-payload";
    case Errc::reward_support: return "reward-support";
    case Errc::unsupported_loss: return "unsupported-loss";
    case Errc::invalid_batch: return "invalid-batch";
    case Errc::no_snapshots: return "no-snapshots";
    case Errc::architecture_mismatch: return "architecture-mismatch";
    case Errc::unsupported_env: return "unsupported-env";
    case Errc::shape_mismatch: return "shape-mismatch";
    case Errc::guard_exceeded: return "guard-exceeded";
    case Errc::invalid_config: return "invalid-config";
    case Errc::io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

using Rng = std::mt19937_64;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Uniform draw on [0, 1) from the top 53 bits; independent of the
// standard library's distribution implementations.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Decorrelated child seed; stable for a given (master, stream) pair.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return splitmix64(splitmix64(master) ^ (0xd1b54a32d192ed03ULL * (stream + 1)));
}

inline double log_sum_exp(std::span<const double> xs) {
  double m = kNegInf;
  for (double x : xs) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

inline double log_add_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace epgfn
