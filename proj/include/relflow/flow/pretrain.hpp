#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "relflow/core/error.hpp"
#include "relflow/core/rng.hpp"
#include "relflow/flow/loss.hpp"
#include "relflow/flow/optim.hpp"

namespace relflow {

struct PretrainConfig {
  std::int64_t steps = 5000;
  int batch_size = 8;
  AdamWConfig optim{.lr = 1e-3, .weight_decay = 0.0, .clip_norm = 1.0};
  std::uint64_t seed = 0;

  void validate() const {
    if (steps < 0) throw ConfigError("pretrain.steps must be >= 0");
    if (batch_size < 1) throw ConfigError("pretrain.batch_size must be >= 1");
    optim.validate();
  }
};

/// The scenes drawn for step `step`; a pure function of (seed, step).
inline FlowBatch pretrain_batch(const std::vector<SceneSample>& data, const PretrainConfig& cfg, std::int64_t step) {
  Rng rng = Rng::stream(cfg.seed, "pretrain", step);
  std::vector<const SceneSample*> picks;
  for (int b = 0; b < cfg.batch_size; ++b)
    picks.push_back(&data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(data.size()) - 1))]);
  return make_flow_batch(picks, rng);
}

/// Flow-matching training from `opt.state().step` up to `cfg.steps`. Returns the per-step loss.
/// `on_step(step, loss)` runs after each update. On a non-finite loss the net and optimizer are
/// left at their last good values and NumericError is thrown.
inline std::vector<double> pretrain(VelocityNet& net, AdamW& opt, const std::vector<SceneSample>& data,
                                    const PretrainConfig& cfg,
                                    const std::function<void(std::int64_t, double)>& on_step = {}) {
  cfg.validate();
  if (data.empty()) throw ConfigError("pretrain: dataset is empty");
  std::vector<double> curve;
  for (std::int64_t step = opt.state().step; step < cfg.steps; ++step) {
    const FlowBatch batch = pretrain_batch(data, cfg, step);
    const LossAndGrad lg = flow_match_loss(net, batch);
    if (!std::isfinite(lg.loss)) throw NumericError("pretrain diverged at step " + std::to_string(step));
    opt.step(net.parameters(), lg.grad);
    curve.push_back(lg.loss);
    if (on_step) on_step(step, lg.loss);
  }
  return curve;
}

}  // namespace relflow
