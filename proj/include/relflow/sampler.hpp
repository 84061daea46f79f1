#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "relflow/core/error.hpp"
#include "relflow/core/parallel.hpp"
#include "relflow/core/rng.hpp"
#include "relflow/flow/codec.hpp"
#include "relflow/flow/loss.hpp"
#include "relflow/flow/net.hpp"

namespace relflow {

enum class SigmaSchedule { FlowRatio, Constant };

inline SigmaSchedule parse_sigma_schedule(std::string_view s) {
  if (s == "flow_ratio") return SigmaSchedule::FlowRatio;
  if (s == "constant") return SigmaSchedule::Constant;
  throw ConfigError("unknown sigma schedule '" + std::string(s) + "'");
}

struct SamplerConfig {
  int steps = 15;
  double noise_level = 0.7;
  SigmaSchedule schedule = SigmaSchedule::FlowRatio;
  double sigma_max = 3.0;

  double dt() const { return 1.0 / steps; }
  double time_at(int k) const { return static_cast<double>(k) / steps; }

  void validate() const {
    if (steps < 1) throw ConfigError("sampler.steps must be >= 1");
    if (!(noise_level >= 0.0)) throw ConfigError("sampler.noise_level must be >= 0");
    if (!(sigma_max > 0.0)) throw ConfigError("sampler.sigma_max must be > 0");
  }
};

/// Noise scale of the Euler-Maruyama step taken at time t (t = 0 is noise, t = 1 is data).
/// FlowRatio is a * sqrt(s / (1 - s)) with s = 1 - t the remaining noise fraction, clamped to
/// sigma_max, so exploration is strongest near the noise end and fades toward the data end.
inline double sigma_at(const SamplerConfig& cfg, double t) {
  if (cfg.noise_level == 0.0) return 0.0;
  if (cfg.schedule == SigmaSchedule::Constant) return cfg.noise_level;
  const double s = 1.0 - t;
  if (t <= 0.0) return cfg.sigma_max;
  return std::min(cfg.sigma_max, cfg.noise_level * std::sqrt(s / t));
}

/// Neumaier-compensated sum.
inline double stable_sum(std::span<const double> v) {
  double sum = 0.0, comp = 0.0;
  for (double x : v) {
    const double t = sum + x;
    comp += std::abs(sum) >= std::abs(x) ? (sum - t) + x : (x - t) + sum;
    sum = t;
  }
  return sum + comp;
}

/// log N(x; mean, std^2 I) summed over coordinates.
inline double gaussian_log_density(std::span<const double> x, std::span<const double> mean, double std_dev) {
  if (!(std_dev > 0.0)) throw DegenerateDensity("gaussian_log_density: zero standard deviation");
  if (x.size() != mean.size()) throw ShapeError("gaussian_log_density: size mismatch");
  std::vector<double> terms(x.size());
  const double inv = 1.0 / std_dev;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = (x[i] - mean[i]) * inv;
    terms[i] = -0.5 * z * z;
  }
  const double norm = static_cast<double>(x.size()) * (std::log(std_dev) + 0.5 * std::log(2.0 * std::numbers::pi));
  return stable_sum(terms) - norm;
}

/// Mean of the Euler-Maruyama transition: x + f dt.
inline Field step_mean(const Field& x, const Field& velocity, double dt) {
  Field m = x;
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = x.data[i] + velocity.data[i] * dt;
  return m;
}

struct StepResult {
  Field next;
  /// NaN when the step is deterministic (no density).
  double log_prob = std::numeric_limits<double>::quiet_NaN();
};

/// One Euler-Maruyama step x + f dt + sigma sqrt(dt) eps. `step` indexes the time grid.
/// With `want_log_prob` and sigma = 0 this throws DegenerateDensity.
inline StepResult step_sde(const VelocityNet& net, const Field& x, int step, const Field& cond,
                           const SamplerConfig& cfg, const Field& noise, bool want_log_prob = true) {
  const double t = cfg.time_at(step), dt = cfg.dt();
  if (t + dt > 1.0 + 1e-12) throw std::domain_error("step_sde: step past t = 1");
  const double sigma = sigma_at(cfg, t);
  if (want_log_prob && sigma == 0.0) throw DegenerateDensity("step_sde: zero noise has no log-density");
  const Field f = net.forward(x, t, cond);
  StepResult out{step_mean(x, f, dt)};
  const Field mean = out.next;
  if (sigma > 0.0) {
    const double scale = sigma * std::sqrt(dt);
    for (std::size_t i = 0; i < out.next.data.size(); ++i) out.next.data[i] += scale * noise.data[i];
    if (want_log_prob) out.log_prob = gaussian_log_density(out.next.data, mean.data, scale);
  }
  return out;
}

/// Recorded path of one stochastic sample.
struct Trajectory {
  std::vector<Field> states;      // T + 1 states, states[0] = x0
  std::vector<Field> noises;      // T noise draws
  std::vector<double> log_probs;  // T step log-densities under the generating net (NaN if a = 0)
  IntrinsicStack prediction;      // decoded final state
  bool has_log_probs = false;
};

/// Integrates from the given x0 with the supplied per-step noises.
inline Trajectory integrate(const VelocityNet& net, const Field& cond, const SamplerConfig& cfg, Field x0,
                            std::vector<Field> noises) {
  cfg.validate();
  if (static_cast<int>(noises.size()) != cfg.steps) throw ShapeError("integrate: need one noise field per step");
  Trajectory tr;
  tr.has_log_probs = cfg.noise_level > 0.0;
  tr.states.reserve(cfg.steps + 1);
  tr.states.push_back(std::move(x0));
  for (int k = 0; k < cfg.steps; ++k) {
    StepResult r = step_sde(net, tr.states.back(), k, cond, cfg, noises[k], tr.has_log_probs);
    tr.log_probs.push_back(r.log_prob);
    tr.states.push_back(std::move(r.next));
  }
  tr.noises = std::move(noises);
  tr.prediction = decode_stack(tr.states.back());
  return tr;
}

/// Noise for stream `member` of image `image_id`: x0 and one field per step.
inline std::pair<Field, std::vector<Field>> draw_noise(std::uint64_t seed, std::uint64_t image_id, std::uint64_t member,
                                                       int steps, int h, int w) {
  Rng x0_rng = Rng::stream(seed, "x0", image_id, member);
  Field x0 = standard_normal_field(x0_rng, h, w, kStateChannels);
  std::vector<Field> eps;
  eps.reserve(steps);
  for (int k = 0; k < steps; ++k) {
    Rng r = Rng::stream(seed, "eps", image_id, member, k);
    eps.push_back(standard_normal_field(r, h, w, kStateChannels));
  }
  return {std::move(x0), std::move(eps)};
}

/// Stochastic sample with noise streams keyed by (seed, image, member).
inline Trajectory sample_sde(const VelocityNet& net, const Field& cond, const SamplerConfig& cfg, std::uint64_t seed,
                             std::uint64_t image_id = 0, std::uint64_t member = 0) {
  auto [x0, eps] = draw_noise(seed, image_id, member, cfg.steps, cond.height, cond.width);
  return integrate(net, cond, cfg, std::move(x0), std::move(eps));
}

/// Deterministic Euler integration. Identical to sample_sde with zero noise level: the noise
/// fields are drawn the same way but scaled by zero.
inline IntrinsicStack sample_ode(const VelocityNet& net, const Field& cond, SamplerConfig cfg, std::uint64_t seed,
                                 std::uint64_t image_id = 0) {
  cfg.noise_level = 0.0;
  cfg.validate();
  Rng x0_rng = Rng::stream(seed, "x0", image_id, 0);
  Field x = standard_normal_field(x0_rng, cond.height, cond.width, kStateChannels);
  for (int k = 0; k < cfg.steps; ++k) x = step_mean(x, net.forward(x, cfg.time_at(k), cond), cfg.dt());
  return decode_stack(x);
}

/// G trajectories with independent x0 and step noise.
inline std::vector<Trajectory> sample_group(const VelocityNet& net, const Field& cond, const SamplerConfig& cfg,
                                            int group_size, std::uint64_t seed, std::uint64_t image_id = 0) {
  if (group_size < 2) throw ConfigError("sample_group: group size must be >= 2");
  if (!(cfg.noise_level > 0.0)) throw ConfigError("sample_group: noise level must be > 0");
  std::vector<Trajectory> group(group_size);
  parallel_for(group_size, [&](int i) { group[i] = sample_sde(net, cond, cfg, seed, image_id, i); });
  return group;
}

/// Log-density of the recorded transition k under another net's mean (same sigma).
inline double step_log_prob_under(const VelocityNet& net_other, const Trajectory& tr, int k, const Field& cond,
                                  const SamplerConfig& cfg) {
  if (!tr.has_log_probs) throw DegenerateDensity("step_log_prob_under: trajectory was sampled without noise");
  const double t = cfg.time_at(k), dt = cfg.dt();
  const double sigma = sigma_at(cfg, t);
  if (sigma == 0.0) throw DegenerateDensity("step_log_prob_under: zero sigma");
  const Field mean = step_mean(tr.states[k], net_other.forward(tr.states[k], t, cond), dt);
  return gaussian_log_density(tr.states[k + 1].data, mean.data, sigma * std::sqrt(dt));
}

/// KL between two equal-variance Gaussian steps from velocities f and f_ref:
/// |f - f_ref|^2 dt / (2 sigma^2).
inline double gaussian_step_kl(const Field& f, const Field& f_ref, double dt, double sigma) {
  if (!(sigma > 0.0)) throw DegenerateDensity("step_kl: zero sigma");
  std::vector<double> sq(f.data.size());
  for (std::size_t i = 0; i < sq.size(); ++i) {
    const double d = f.data[i] - f_ref.data[i];
    sq[i] = d * d;
  }
  return stable_sum(sq) * dt / (2.0 * sigma * sigma);
}

inline double step_kl(const VelocityNet& net, const VelocityNet& net_ref, const Field& x, int step, const Field& cond,
                      const SamplerConfig& cfg) {
  const double t = cfg.time_at(step);
  const double sigma = sigma_at(cfg, t);
  return gaussian_step_kl(net.forward(x, t, cond), net_ref.forward(x, t, cond), cfg.dt(), sigma);
}

}  // namespace relflow
