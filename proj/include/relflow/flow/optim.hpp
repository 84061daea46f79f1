#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "relflow/core/error.hpp"
#include "relflow/flow/net.hpp"

namespace relflow {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Global gradient-norm clip; <= 0 disables.
  double clip_norm = 1.0;
  /// Cosine annealing horizon in steps; <= 0 keeps the rate constant.
  std::int64_t total_steps = 0;

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("optimizer lr must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optimizer betas must lie in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("optimizer eps must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("optimizer weight_decay must be >= 0");
  }
};

struct AdamWState {
  std::int64_t step = 0;
  std::vector<double> m;
  std::vector<double> v;
};

inline double global_norm(std::span<const double> g) {
  double s = 0.0;
  for (double x : g) s += x * x;
  return std::sqrt(s);
}

/// Adam with decoupled weight decay, global-norm clipping and cosine annealing.
/// Parameters and moments are kept float-representable after every step.
class AdamW {
 public:
  AdamW() = default;
  AdamW(AdamWConfig cfg, std::size_t n) : cfg_(cfg) {
    cfg_.validate();
    state_.m.assign(n, 0.0);
    state_.v.assign(n, 0.0);
  }

  double current_lr() const {
    if (cfg_.total_steps <= 0) return cfg_.lr;
    const double progress = std::min(1.0, static_cast<double>(state_.step) / static_cast<double>(cfg_.total_steps));
    return 0.5 * cfg_.lr * (1.0 + std::cos(std::numbers::pi * progress));
  }

  /// Applies one update in place. Returns the pre-clip gradient norm.
  double step(std::span<double> params, std::span<const double> grad) {
    if (params.size() != state_.m.size() || grad.size() != params.size())
      throw ShapeError("AdamW::step: size mismatch");
    const double norm = global_norm(grad);
    if (!std::isfinite(norm)) throw NumericError("AdamW::step: non-finite gradient");
    const double scale = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    const double lr = current_lr();
    ++state_.step;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(state_.step));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(state_.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grad[i] * scale;
      double& m = state_.m[i];
      double& v = state_.v[i];
      m = static_cast<float>(cfg_.beta1 * m + (1.0 - cfg_.beta1) * g);
      v = static_cast<float>(cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g);
      const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps) + cfg_.weight_decay * params[i];
      params[i] = static_cast<float>(params[i] - lr * update);
    }
    return norm;
  }

  const AdamWConfig& config() const noexcept { return cfg_; }
  AdamWConfig& config() noexcept { return cfg_; }
  const AdamWState& state() const noexcept { return state_; }
  void set_state(AdamWState s) {
    if (s.m.size() != state_.m.size() || s.v.size() != state_.v.size()) throw ShapeError("AdamW::set_state: size mismatch");
    state_ = std::move(s);
  }

 private:
  AdamWConfig cfg_;
  AdamWState state_;
};

}  // namespace relflow
