#pragma once

// Dense leaky-ReLU networks with hand-written reverse accumulation, and AdamW.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "epgfn/common.hpp"

namespace epgfn {

inline constexpr double kLeakySlope = 0.01;

struct MlpSpec {
  std::vector<std::size_t> widths;  // input, hidden..., output

  MlpSpec() = default;
  explicit MlpSpec(std::vector<std::size_t> w) : widths(std::move(w)) { validate(); }

  void validate() const {
    if (widths.size() < 3) throw Error(Errc::dimension_mismatch, "mlp needs at least one hidden layer");
    for (auto w : widths)
      if (w < 1) throw Error(Errc::dimension_mismatch, "mlp widths must be >= 1");
  }
  std::size_t layers() const { return widths.size() - 1; }
  std::size_t input() const { return widths.front(); }
  std::size_t output() const { return widths.back(); }
  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < layers(); ++l) n += widths[l + 1] * (widths[l] + 1);
    return n;
  }
  /// Offset of layer l's weight block; its biases follow the weights.
  std::size_t layer_offset(std::size_t l) const {
    std::size_t n = 0;
    for (std::size_t k = 0; k < l; ++k) n += widths[k + 1] * (widths[k] + 1);
    return n;
  }
  std::string to_string() const {
    std::string s;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (i) s += ',';
      s += std::to_string(widths[i]);
    }
    return s;
  }
  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

/// Pre-activations of every layer plus the input; enough to run backward.
struct MlpCache {
  std::vector<std::vector<double>> pre;  // pre[l] = affine output of layer l
  std::vector<double> input;
};

inline double leaky(double z) { return z > 0 ? z : kLeakySlope * z; }
inline double leaky_grad(double z) { return z > 0 ? 1.0 : kLeakySlope; }

inline std::vector<double> mlp_forward(const MlpSpec& spec, std::span<const double> params,
                                       std::span<const double> input, MlpCache* cache = nullptr) {
  if (input.size() != spec.input()) throw Error(Errc::dimension_mismatch, "mlp input width mismatch");
  if (params.size() != spec.param_count()) throw Error(Errc::dimension_mismatch, "mlp parameter count mismatch");
  if (cache) {
    cache->input.assign(input.begin(), input.end());
    cache->pre.resize(spec.layers());
  }
  std::vector<double> act(input.begin(), input.end());
  std::vector<double> z;
  const double* p = params.data();
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
    const double* w = p;
    const double* b = p + out * in;
    z.assign(b, b + out);
    for (std::size_t o = 0; o < out; ++o) {
      const double* row = w + o * in;
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += row[i] * act[i];
      z[o] += acc;
    }
    p += out * (in + 1);
    if (cache) cache->pre[l] = z;
    if (l + 1 < spec.layers()) {
      act.resize(out);
      for (std::size_t o = 0; o < out; ++o) act[o] = leaky(z[o]);
    } else {
      act = z;
    }
  }
  return act;
}

/// Accumulates (+=) d(out_grad · output)/d params into param_grad.
inline void mlp_backward(const MlpSpec& spec, std::span<const double> params, const MlpCache& cache,
                         std::span<const double> out_grad, std::span<double> param_grad,
                         std::vector<double>* input_grad = nullptr) {
  if (cache.pre.size() != spec.layers() || cache.input.size() != spec.input())
    throw Error(Errc::dimension_mismatch, "stale mlp cache");
  if (out_grad.size() != spec.output()) throw Error(Errc::dimension_mismatch, "output gradient width mismatch");
  if (param_grad.size() != spec.param_count() || params.size() != spec.param_count())
    throw Error(Errc::dimension_mismatch, "parameter gradient size mismatch");
  std::vector<double> delta(out_grad.begin(), out_grad.end());
  std::vector<double> prev_act, prev_delta;
  for (std::size_t l = spec.layers(); l-- > 0;) {
    const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
    const std::size_t off = spec.layer_offset(l);
    if (l == 0) {
      prev_act = cache.input;
    } else {
      const auto& zp = cache.pre[l - 1];
      prev_act.resize(in);
      for (std::size_t i = 0; i < in; ++i) prev_act[i] = leaky(zp[i]);
    }
    double* gw = param_grad.data() + off;
    double* gb = gw + out * in;
    for (std::size_t o = 0; o < out; ++o) {
      const double d = delta[o];
      if (d == 0.0) continue;
      gb[o] += d;
      double* row = gw + o * in;
      for (std::size_t i = 0; i < in; ++i) row[i] += d * prev_act[i];
    }
    if (l == 0 && !input_grad) break;
    prev_delta.assign(in, 0.0);
    const double* w = params.data() + off;
    for (std::size_t o = 0; o < out; ++o) {
      const double d = delta[o];
      if (d == 0.0) continue;
      const double* row = w + o * in;
      for (std::size_t i = 0; i < in; ++i) prev_delta[i] += d * row[i];
    }
    if (l == 0) {
      *input_grad = prev_delta;
      break;
    }
    const auto& zp = cache.pre[l - 1];
    for (std::size_t i = 0; i < in; ++i) prev_delta[i] *= leaky_grad(zp[i]);
    delta.swap(prev_delta);
  }
}

/// Glorot-uniform weights, zero biases.
inline std::vector<double> mlp_init(const MlpSpec& spec, Rng& rng) {
  std::vector<double> params(spec.param_count(), 0.0);
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const std::size_t in = spec.widths[l], out = spec.widths[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    double* w = params.data() + spec.layer_offset(l);
    for (std::size_t k = 0; k < in * out; ++k) w[k] = (2.0 * uniform01(rng) - 1.0) * limit;
  }
  return params;
}

struct AdamWConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 0.0;  // <= 0 disables global-norm clipping
};

/// Contiguous parameter range with its own learning rate and decay switch.
struct ParamGroup {
  std::size_t offset = 0;
  std::size_t size = 0;
  double lr = 0.0;  // <= 0 uses the optimizer default
  bool decay = true;
};

class AdamW {
 public:
  AdamW() = default;
  AdamW(AdamWConfig cfg, std::size_t n, std::vector<ParamGroup> groups = {})
      : cfg_(cfg), m_(n, 0.0), v_(n, 0.0), groups_(std::move(groups)) {
    if (!(cfg_.lr > 0)) throw Error(Errc::invalid_config, "learning rate must be > 0");
    if (groups_.empty()) groups_.push_back({0, n, 0.0, true});
  }

  const AdamWConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }
  /// Multiplies every group's learning rate from the next step on.
  void set_lr_scale(double s) { lr_scale_ = s; }
  std::span<const double> first_moment() const { return m_; }
  std::span<const double> second_moment() const { return v_; }

  /// Grows the moment arrays (tabular heads add rows); the last group absorbs the growth.
  void resize(std::size_t n) {
    if (n < m_.size()) throw Error(Errc::dimension_mismatch, "optimizer cannot shrink");
    const std::size_t added = n - m_.size();
    m_.resize(n, 0.0);
    v_.resize(n, 0.0);
    groups_.back().size += added;
  }

  void step(std::span<double> params, std::span<const double> grad) {
    if (params.size() != m_.size() || grad.size() != m_.size())
      throw Error(Errc::dimension_mismatch, "optimizer state size mismatch");
    double sq = 0.0;
    for (double g : grad) {
      if (!std::isfinite(g)) throw Error(Errc::non_finite, "non-finite gradient rejected");
      sq += g * g;
    }
    double scale = 1.0;
    if (cfg_.clip_norm > 0 && std::sqrt(sq) > cfg_.clip_norm) scale = cfg_.clip_norm / std::sqrt(sq);
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& g : groups_) {
      const double lr = (g.lr > 0 ? g.lr : cfg_.lr) * lr_scale_;
      const double keep = g.decay ? 1.0 - lr * cfg_.weight_decay : 1.0;
      for (std::size_t i = g.offset; i < g.offset + g.size; ++i) {
        const double gi = grad[i] * scale;
        m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * gi;
        v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * gi * gi;
        params[i] *= keep;
        params[i] -= lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + cfg_.eps);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<double> m_, v_;
  std::vector<ParamGroup> groups_;
  std::size_t t_ = 0;
  double lr_scale_ = 1.0;
};

}  // namespace epgfn
