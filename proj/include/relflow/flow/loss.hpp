#pragma once

#include <span>
#include <vector>

#include "relflow/core/rng.hpp"
#include "relflow/flow/codec.hpp"
#include "relflow/flow/net.hpp"
#include "relflow/scenegen.hpp"

namespace relflow {

/// x_t = (1 - t) x0 + t x1; the regression target is x1 - x0.
struct FlowBatch {
  std::vector<Field> x0;
  std::vector<Field> x1;
  std::vector<double> t;
  std::vector<Field> cond;

  std::size_t size() const noexcept { return x0.size(); }
};

inline Field standard_normal_field(Rng& rng, int h, int w, int c) {
  Field f(h, w, c);
  for (double& v : f.data) v = rng.normal();
  return f;
}

inline Field interpolate(const Field& x0, const Field& x1, double t) {
  Field xt = x0;
  for (std::size_t i = 0; i < xt.data.size(); ++i) xt.data[i] = (1.0 - t) * x0.data[i] + t * x1.data[i];
  return xt;
}

/// Batch over the given scenes with fresh noise and uniform times in [0, 1).
inline FlowBatch make_flow_batch(std::span<const SceneSample* const> scenes, Rng& rng) {
  FlowBatch b;
  for (const SceneSample* s : scenes) {
    b.x1.push_back(encode_stack(s->gt));
    b.cond.push_back(encode_condition(s->rgb));
    b.x0.push_back(standard_normal_field(rng, s->rgb.height, s->rgb.width, kStateChannels));
    b.t.push_back(rng.uniform());
  }
  return b;
}

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Mean squared error between the predicted and target velocity, averaged over every
/// coordinate of every batch element.
inline LossAndGrad flow_match_loss(const VelocityNet& net, const FlowBatch& batch, bool with_grad = true) {
  if (batch.size() == 0) throw ShapeError("flow_match_loss: empty batch");
  LossAndGrad out;
  if (with_grad) out.grad.assign(net.parameter_count(), 0.0);
  const double denom = static_cast<double>(batch.size()) * static_cast<double>(batch.x0.front().size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Field xt = interpolate(batch.x0[i], batch.x1[i], batch.t[i]);
    Tape tape;
    const Field f = net.forward(xt, batch.t[i], batch.cond[i], with_grad ? &tape : nullptr);
    Field dout(f.height, f.width, f.channels);
    for (std::size_t k = 0; k < f.data.size(); ++k) {
      const double r = f.data[k] - (batch.x1[i].data[k] - batch.x0[i].data[k]);
      out.loss += r * r;
      dout.data[k] = 2.0 * r / denom;
    }
    if (with_grad) net.backward(tape, dout, out.grad);
  }
  out.loss /= denom;
  return out;
}

}  // namespace relflow
