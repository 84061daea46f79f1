#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "relflow/core/error.hpp"
#include "relflow/core/parallel.hpp"
#include "relflow/core/rng.hpp"
#include "relflow/flow/optim.hpp"
#include "relflow/flow/pretrain.hpp"
#include "relflow/judge.hpp"
#include "relflow/poisson.hpp"
#include "relflow/sampler.hpp"

namespace relflow {

enum class RewardKind { JudgeAlignment, DepthNormalConsistency };

inline RewardKind parse_reward_kind(std::string_view s) {
  if (s == "alignment" || s == "judge") return RewardKind::JudgeAlignment;
  if (s == "dn") return RewardKind::DepthNormalConsistency;
  throw ConfigError("unknown reward kind '" + std::string(s) + "'");
}

struct TrainConfig {
  int group_size = 8;
  int pairs = 40;
  int epochs = 3;
  double clip_range = 0.2;
  double kl_beta = 0.01;
  AdamWConfig optim{.lr = 1e-5, .weight_decay = 0.0, .clip_norm = 1.0};
  SamplerConfig sampler{.steps = 15, .noise_level = 0.7};
  RewardKind reward = RewardKind::JudgeAlignment;
  bool interleave_flow_matching = false;
  int interleave_batch = 4;
  /// When false, pairs the prediction leaves ambiguous are dropped instead of counted as misses.
  bool ambiguous_is_disagreement = true;
  /// Depth units per pixel for the depth-normal reward; <= 0 derives it from the default camera.
  double dn_depth_per_pixel = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (group_size < 2) throw ConfigError("grpo.group_size must be >= 2");
    if (pairs < 1) throw ConfigError("grpo.pairs must be >= 1");
    if (epochs < 1) throw ConfigError("grpo.epochs must be >= 1");
    if (!(clip_range > 0.0 && clip_range < 1.0)) throw ConfigError("grpo.clip_range must lie in (0,1)");
    if (!(kl_beta >= 0.0)) throw ConfigError("grpo.kl_beta must be >= 0");
    if (interleave_batch < 1) throw ConfigError("grpo.interleave_batch must be >= 1");
    optim.validate();
    sampler.validate();
    if (!(sampler.noise_level > 0.0)) throw ConfigError("grpo needs a positive sampler noise level");
  }
};

/// One sampled group and its reward statistics.
struct GroupBatch {
  std::size_t image_id = 0;
  Modality modality = Modality::Depth;
  Field cond;
  std::vector<Trajectory> trajectories;
  std::vector<double> rewards;
  double reward_mean = 0.0;
  double reward_std = 0.0;
  std::vector<double> advantages;
};

// ---------------------------------------------------------------------------------------------
// Rewards

/// Fraction of judged pairs whose relation on the prediction matches the judge's label.
inline double alignment_reward(const IntrinsicStack& pred, std::span<const JudgedPair> judged, const JudgeConfig& rules,
                               bool ambiguous_is_disagreement = true) {
  int agree = 0, used = 0;
  for (const JudgedPair& jp : judged) {
    const auto rel = derive_relation(pred, jp.pair, rules);
    if (!rel && !ambiguous_is_disagreement) continue;
    ++used;
    if (rel && rel->label == jp.judgment.label) ++agree;
  }
  if (used == 0) throw RewardUnavailable("alignment_reward: no usable pairs");
  return static_cast<double>(agree) / used;
}

/// Queries `judge` on every pair of `sample` and scores `pred` against the answers.
inline double alignment_reward(const SceneSample& sample, const IntrinsicStack& pred, PairJudge& judge,
                               std::span<const PointPair> pairs, const JudgeConfig& rules, std::uint64_t image_id = 0,
                               std::uint64_t round = 0) {
  std::vector<JudgedPair> judged;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    judged.push_back({pairs[i], judge.query(sample, pairs[i], QueryKey{image_id, round, i})});
  return alignment_reward(pred, judged, rules);
}

/// Depth units per pixel of the default orthographic camera at this resolution.
inline double default_depth_per_pixel(int resolution) {
  const Camera cam;
  return cam.pixel_pitch(resolution) / cam.far;
}

/// Negative mean absolute difference between the predicted depth and the depth integrated from the
/// predicted normals, after removing the best (median) offset.
inline double dn_consistency_reward(const IntrinsicStack& pred, double depth_per_pixel = 0.0, double min_nz = 1e-3) {
  if (depth_per_pixel <= 0.0) depth_per_pixel = default_depth_per_pixel(pred.width());
  const PoissonResult integ = poisson_integrate(pred.normals, depth_per_pixel, min_nz);
  if (integ.coverage == 0.0) throw RewardUnavailable("dn_consistency_reward: no pixel with usable normals");
  std::vector<double> diff;
  diff.reserve(pred.depth.size());
  for (std::size_t p = 0; p < integ.valid.size(); ++p)
    if (integ.valid[p]) diff.push_back(double(pred.depth.data[p]) - integ.depth.data[p]);
  std::vector<double> sorted = diff;
  const std::size_t mid = sorted.size() / 2;
  std::nth_element(sorted.begin(), sorted.begin() + mid, sorted.end());
  double offset = sorted[mid];
  if (sorted.size() % 2 == 0) offset = 0.5 * (offset + *std::max_element(sorted.begin(), sorted.begin() + mid));
  double sum = 0.0;
  for (double d : diff) sum += std::abs(d - offset);
  return -sum / static_cast<double>(diff.size());
}

// ---------------------------------------------------------------------------------------------
// Advantages and objective

/// (r - mean) / std with population statistics; all zeros when the group has no spread.
inline std::vector<double> group_advantages(std::span<const double> rewards, double* mean_out = nullptr,
                                            double* std_out = nullptr) {
  if (rewards.size() < 2) throw ConfigError("group_advantages: need at least two rewards");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  if (mean_out) *mean_out = mean;
  if (std_out) *std_out = sd;
  std::vector<double> adv(rewards.size(), 0.0);
  if (sd < 1e-8) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

struct SurrogateTerm {
  double value = 0.0;
  double d_ratio = 0.0;
};

/// min(rho A, clip(rho, 1 - eps, 1 + eps) A) and its derivative in rho.
inline SurrogateTerm clipped_surrogate(double ratio, double advantage, double clip_range) {
  const double unclipped = ratio * advantage;
  const double clipped = std::clamp(ratio, 1.0 - clip_range, 1.0 + clip_range) * advantage;
  if (unclipped <= clipped) return {unclipped, advantage};
  return {clipped, 0.0};
}

struct ObjectiveResult {
  double loss = 0.0;
  double policy_loss = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  std::vector<double> grad;
};

/// Negated clipped surrogate plus beta times the mean per-step KL to `ref_net`, averaged over
/// members and steps. Trajectory log-probs must come from the net that generated them.
/// Gradients are taken with respect to `new_net` only.
inline ObjectiveResult grpo_objective(const VelocityNet& new_net, const VelocityNet& ref_net, const GroupBatch& group,
                                      const SamplerConfig& sampler, double clip_range, double kl_beta,
                                      bool with_grad = true) {
  const int g = static_cast<int>(group.trajectories.size());
  if (g == 0 || static_cast<int>(group.advantages.size()) != g) throw ShapeError("grpo_objective: malformed group");
  const int steps = sampler.steps;
  const double scale = 1.0 / (static_cast<double>(g) * steps);
  const double dt = sampler.dt();

  struct MemberOut {
    double policy = 0.0, kl = 0.0;
    int clipped = 0;
    std::vector<double> grad;
  };
  std::vector<MemberOut> members(g);
  parallel_for(g, [&](int i) {
    const Trajectory& tr = group.trajectories[i];
    if (!tr.has_log_probs || static_cast<int>(tr.log_probs.size()) != steps)
      throw std::logic_error("grpo_objective: trajectory lacks log-probs (sampled with zero noise?)");
    MemberOut& out = members[i];
    if (with_grad) out.grad.assign(new_net.parameter_count(), 0.0);
    for (int k = 0; k < steps; ++k) {
      const double t = sampler.time_at(k);
      const double sigma = sigma_at(sampler, t);
      if (sigma == 0.0) throw DegenerateDensity("grpo_objective: zero sigma");
      const double sd = sigma * std::sqrt(dt);
      Tape tape;
      const Field f = new_net.forward(tr.states[k], t, group.cond, with_grad ? &tape : nullptr);
      const Field mean = step_mean(tr.states[k], f, dt);
      const double lp = gaussian_log_density(tr.states[k + 1].data, mean.data, sd);
      const double ratio = std::exp(lp - tr.log_probs[k]);
      const SurrogateTerm term = clipped_surrogate(ratio, group.advantages[i], clip_range);
      out.policy -= term.value * scale;
      if (term.d_ratio == 0.0 && group.advantages[i] != 0.0) ++out.clipped;

      Field dout(f.height, f.width, f.channels);
      const double coeff = -term.d_ratio * ratio * dt / (sd * sd) * scale;
      for (std::size_t c = 0; c < dout.data.size(); ++c) dout.data[c] = coeff * (tr.states[k + 1].data[c] - mean.data[c]);

      const Field f_ref = ref_net.forward(tr.states[k], t, group.cond);
      const double kl = gaussian_step_kl(f, f_ref, dt, sigma);
      out.kl += kl * scale;
      if (kl_beta > 0.0) {
        const double kc = kl_beta * dt / (sigma * sigma) * scale;
        for (std::size_t c = 0; c < dout.data.size(); ++c) dout.data[c] += kc * (f.data[c] - f_ref.data[c]);
      }
      if (with_grad) new_net.backward(tape, dout, out.grad);
    }
  });

  ObjectiveResult res;
  if (with_grad) res.grad.assign(new_net.parameter_count(), 0.0);
  int clipped = 0;
  for (const MemberOut& m : members) {
    res.policy_loss += m.policy;
    res.mean_kl += m.kl;
    clipped += m.clipped;
    if (with_grad)
      for (std::size_t p = 0; p < res.grad.size(); ++p) res.grad[p] += m.grad[p];
  }
  res.loss = res.policy_loss + kl_beta * res.mean_kl;
  res.clip_fraction = static_cast<double>(clipped) / (static_cast<double>(g) * steps);
  return res;
}

// ---------------------------------------------------------------------------------------------
// Training loop

/// What the policy is allowed to see of a training image.
struct PolicyImage {
  std::size_t image_id = 0;
  ImageF rgb;
};

inline std::vector<PolicyImage> policy_view(const std::vector<SceneSample>& scenes) {
  std::vector<PolicyImage> out;
  out.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) out.push_back({i, scenes[i].rgb});
  return out;
}

struct GrpoLogRecord {
  std::int64_t step = 0;
  std::size_t image_id = 0;
  Modality modality = Modality::Depth;
  std::vector<double> rewards;
  double mean_reward = 0.0;
  double kl = 0.0;
  double loss = 0.0;
  bool skipped = false;
  std::string reason;

  nlohmann::json to_json() const {
    nlohmann::json j{{"step", step},         {"image_id", image_id}, {"modality", to_string(modality)},
                     {"rewards", rewards},   {"mean_reward", mean_reward}, {"kl", kl},
                     {"loss", loss},         {"skipped", skipped}};
    if (!reason.empty()) j["reason"] = reason;
    return j;
  }
};

struct GrpoResult {
  std::vector<GrpoLogRecord> log;
  int skipped = 0;
};

/// Samples one group for `image` and scores it. Returns false (with a reason) when the image
/// has to be skipped.
inline bool build_group(const VelocityNet& net, const PolicyImage& image, JudgeService* judge, const TrainConfig& cfg,
                        std::int64_t iteration, GroupBatch& group, std::string& reason) {
  group = GroupBatch{};
  group.image_id = image.image_id;
  group.cond = encode_condition(image.rgb);
  Rng mod_rng = Rng::stream(cfg.seed, "modality", iteration);
  group.modality = cfg.reward == RewardKind::DepthNormalConsistency ? Modality::Depth
                                                                     : kModalities[mod_rng.uniform_int(0, 3)];
  std::vector<JudgedPair> judged;
  if (cfg.reward == RewardKind::JudgeAlignment) {
    if (judge == nullptr) throw ConfigError("alignment reward needs a judge");
    try {
      judged = judge->judge_pairs(image.image_id, group.modality, cfg.pairs, static_cast<std::uint64_t>(iteration));
    } catch (const SamplingExhausted& e) {
      reason = e.what();
      return false;
    } catch (const JudgeUnavailable& e) {
      if (!judge->alive()) throw;
      reason = e.what();
      return false;
    }
  }
  group.trajectories = sample_group(net, group.cond, cfg.sampler, cfg.group_size, derive_seed(cfg.seed, "rollout"),
                                    static_cast<std::uint64_t>(iteration));
  JudgeConfig rules;
  try {
    for (const Trajectory& tr : group.trajectories)
      group.rewards.push_back(cfg.reward == RewardKind::JudgeAlignment
                                  ? alignment_reward(tr.prediction, judged, rules, cfg.ambiguous_is_disagreement)
                                  : dn_consistency_reward(tr.prediction, cfg.dn_depth_per_pixel));
  } catch (const RewardUnavailable& e) {
    reason = e.what();
    return false;
  }
  group.advantages = group_advantages(group.rewards, &group.reward_mean, &group.reward_std);
  return true;
}

/// GRPO fine-tuning. The policy sees RGB only; the judge owns anything derived from ground truth.
/// The reference net is frozen at entry; rollouts come from the current parameters, followed by
/// one update per group. With interleaving, each GRPO update is followed by one flow-matching
/// update on `interleave_data`.
inline GrpoResult train_grpo(VelocityNet& net, const std::vector<PolicyImage>& images, JudgeService* judge,
                             const TrainConfig& cfg, const std::vector<SceneSample>* interleave_data = nullptr,
                             const std::function<void(const GrpoLogRecord&)>& sink = {}) {
  cfg.validate();
  if (images.empty()) throw ConfigError("train_grpo: no training images");
  if (cfg.interleave_flow_matching && (interleave_data == nullptr || interleave_data->empty()))
    throw ConfigError("train_grpo: interleaving needs a synthetic dataset");

  const VelocityNet ref = net;
  const std::int64_t total = static_cast<std::int64_t>(cfg.epochs) * static_cast<std::int64_t>(images.size());
  AdamWConfig ocfg = cfg.optim;
  ocfg.total_steps = total * (cfg.interleave_flow_matching ? 2 : 1);
  AdamW opt(ocfg, net.parameter_count());
  PretrainConfig fm_cfg;
  fm_cfg.batch_size = cfg.interleave_batch;
  fm_cfg.seed = derive_seed(cfg.seed, "interleave");

  GrpoResult result;
  std::int64_t iteration = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), 0);
    Rng order_rng = Rng::stream(cfg.seed, "order", epoch);
    std::shuffle(order.begin(), order.end(), order_rng.engine());

    for (std::size_t idx : order) {
      const PolicyImage& image = images[idx];
      GrpoLogRecord rec;
      rec.step = iteration;
      rec.image_id = image.image_id;

      GroupBatch group;
      if (!build_group(net, image, judge, cfg, iteration, group, rec.reason)) {
        rec.modality = group.modality;
        rec.skipped = true;
        ++result.skipped;
      } else {
        rec.modality = group.modality;
        rec.rewards = group.rewards;
        rec.mean_reward = group.reward_mean;
        const ObjectiveResult obj = grpo_objective(net, ref, group, cfg.sampler, cfg.clip_range, cfg.kl_beta);
        if (!std::isfinite(obj.loss)) throw NumericError("train_grpo: non-finite loss at step " + std::to_string(iteration));
        rec.loss = obj.loss;
        rec.kl = obj.mean_kl;
        opt.step(net.parameters(), obj.grad);
        if (cfg.interleave_flow_matching) {
          const FlowBatch fb = pretrain_batch(*interleave_data, fm_cfg, iteration);
          const LossAndGrad lg = flow_match_loss(net, fb);
          if (!std::isfinite(lg.loss)) throw NumericError("train_grpo: non-finite flow-matching loss");
          opt.step(net.parameters(), lg.grad);
        }
      }
      if (sink) sink(rec);
      result.log.push_back(std::move(rec));
      ++iteration;
    }
  }
  return result;
}

/// Mean per-step KL between `net` and `ref` along SDE rollouts of `net` on the given images.
inline double mean_kl_to_reference(const VelocityNet& net, const VelocityNet& ref, const std::vector<PolicyImage>& images,
                                   const SamplerConfig& sampler, std::uint64_t seed) {
  double total = 0.0;
  int count = 0;
  for (const PolicyImage& img : images) {
    const Field cond = encode_condition(img.rgb);
    const Trajectory tr = sample_sde(net, cond, sampler, seed, img.image_id, 0);
    for (int k = 0; k < sampler.steps; ++k) {
      total += step_kl(net, ref, tr.states[k], k, cond, sampler);
      ++count;
    }
  }
  return count ? total / count : 0.0;
}

}  // namespace relflow
