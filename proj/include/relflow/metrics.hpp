#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "relflow/core/error.hpp"
#include "relflow/core/parallel.hpp"
#include "relflow/flow/codec.hpp"
#include "relflow/flow/net.hpp"
#include "relflow/grpo.hpp"
#include "relflow/judge.hpp"
#include "relflow/sampler.hpp"

namespace relflow {

// ---------------------------------------------------------------------------------------------
// WHDR

enum class Lightness { FirstDarker, SecondDarker, Equal };

struct LightnessJudgment {
  PointPair pair;
  Lightness label = Lightness::Equal;
  double weight = 1.0;
};

inline double albedo_luminance(const ImageF& albedo, Pixel p) {
  return luminance709(albedo(p.row, p.col, 0), albedo(p.row, p.col, 1), albedo(p.row, p.col, 2));
}

/// Ratio test: the second point is darker iff L1 > (1 + delta) L2, and vice versa.
inline Lightness lightness_relation(double l1, double l2, double delta) {
  if (l1 > (1.0 + delta) * l2) return Lightness::SecondDarker;
  if (l2 > (1.0 + delta) * l1) return Lightness::FirstDarker;
  return Lightness::Equal;
}

inline Lightness lightness_relation(const ImageF& albedo, const PointPair& pair, double delta) {
  return lightness_relation(albedo_luminance(albedo, pair.p1), albedo_luminance(albedo, pair.p2), delta);
}

/// Weighted fraction of judgments the predicted albedo contradicts.
inline double whdr(const ImageF& pred_albedo, std::span<const LightnessJudgment> judgments, double delta) {
  if (judgments.empty()) throw ConfigError("whdr: no judgments");
  if (!(delta > 0.0)) throw ConfigError("whdr: delta must be > 0");
  if (pred_albedo.channels != 3) throw ShapeError("whdr: expected 3-channel albedo");
  double wrong = 0.0, total = 0.0;
  for (const LightnessJudgment& j : judgments) {
    if (lightness_relation(pred_albedo, j.pair, delta) != j.label) wrong += j.weight;
    total += j.weight;
  }
  return wrong / total;
}

inline std::vector<LightnessJudgment> lightness_judgments(const ImageF& gt_albedo, std::span<const PointPair> pairs,
                                                         double delta) {
  std::vector<LightnessJudgment> out;
  out.reserve(pairs.size());
  for (const PointPair& p : pairs) out.push_back({p, lightness_relation(gt_albedo, p, delta)});
  return out;
}

// ---------------------------------------------------------------------------------------------
// Depth, normals, reconstruction

struct DepthMetrics {
  double abs_rel = 0.0;
  double delta1 = 0.0;
  int clamped = 0;
  double scale = 1.0;
  double shift = 0.0;
};

/// AbsRel and delta1 after least-squares scale and shift alignment of the prediction.
inline DepthMetrics depth_metrics(const ImageF& pred, const ImageF& gt) {
  require_same_shape(pred, gt, "depth_metrics");
  const std::size_t n = gt.data.size();
  if (n == 0) throw ShapeError("depth_metrics: empty depth map");
  for (float d : gt.data)
    if (!(d > 0.0f)) throw ConfigError("depth_metrics: ground truth depth must be positive");
  double sp = 0, sg = 0, spp = 0, spg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = pred.data[i], g = gt.data[i];
    sp += p, sg += g, spp += p * p, spg += p * g;
  }
  DepthMetrics m;
  const double det = n * spp - sp * sp;
  if (std::abs(det) > 1e-12 * std::max(1.0, n * spp)) {
    m.scale = (n * spg - sp * sg) / det;
    m.shift = (sg - m.scale * sp) / n;
  } else {
    m.scale = 0.0;
    m.shift = sg / n;
  }
  double abs_rel = 0.0;
  int within = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double a = m.scale * pred.data[i] + m.shift;
    const double g = gt.data[i];
    if (a <= 0.0) {
      a = 1e-6;
      ++m.clamped;
    }
    abs_rel += std::abs(a - g) / g;
    if (std::max(a / g, g / a) < 1.25) ++within;
  }
  m.abs_rel = abs_rel / n;
  m.delta1 = static_cast<double>(within) / n;
  return m;
}

struct NormalMetrics {
  double mean_angle_deg = 0.0;
  double fraction_below = 0.0;
  int degenerate = 0;
};

/// Mean angular error (degrees) and fraction of pixels under `threshold_deg`. Predictions are
/// renormalized; a zero-length prediction counts as a 90 degree error.
inline NormalMetrics normal_metrics(const ImageF& pred, const ImageF& gt, double threshold_deg = 11.25) {
  require_same_shape(pred, gt, "normal_metrics");
  if (gt.channels != 3) throw ShapeError("normal_metrics: expected 3-channel normals");
  NormalMetrics m;
  const int n = gt.pixels();
  if (n == 0) throw ShapeError("normal_metrics: empty normal map");
  double sum = 0.0;
  int below = 0;
  for (int r = 0; r < gt.height; ++r)
    for (int c = 0; c < gt.width; ++c) {
      const auto p = pred.pixel(r, c), g = gt.pixel(r, c);
      const double len = std::sqrt(double(p[0]) * p[0] + double(p[1]) * p[1] + double(p[2]) * p[2]);
      double angle = 90.0;
      if (len > 0.0 && std::isfinite(len)) {
        const double dot = (double(p[0]) * g[0] + double(p[1]) * g[1] + double(p[2]) * g[2]) / len;
        angle = std::acos(std::clamp(dot, -1.0, 1.0)) * 180.0 / std::numbers::pi;
      } else {
        ++m.degenerate;
      }
      sum += angle;
      if (angle < threshold_deg) ++below;
    }
  m.mean_angle_deg = sum / n;
  m.fraction_below = static_cast<double>(below) / n;
  return m;
}

inline constexpr double kPsnrCap = 99.0;

struct Reconstruction {
  double rmse = 0.0;
  double psnr = kPsnrCap;
};

/// RGB rebuilt as clamp(albedo * irradiance + residual, 0, 1) compared with the input.
inline Reconstruction cyclic_reconstruction(const IntrinsicStack& pred, const ImageF& rgb,
                                            const ImageF* residual = nullptr) {
  if (rgb.channels != 3 || rgb.height != pred.height() || rgb.width != pred.width())
    throw ShapeError("cyclic_reconstruction: rgb does not match the prediction");
  if (residual && !residual->same_shape(rgb)) throw ShapeError("cyclic_reconstruction: residual shape");
  double sq = 0.0;
  for (int r = 0; r < rgb.height; ++r)
    for (int c = 0; c < rgb.width; ++c)
      for (int k = 0; k < 3; ++k) {
        double v = double(pred.albedo(r, c, k)) * double(pred.irradiance(r, c));
        if (residual) v += (*residual)(r, c, k);
        const double d = std::clamp(v, 0.0, 1.0) - rgb(r, c, k);
        sq += d * d;
      }
  Reconstruction out;
  out.rmse = std::sqrt(sq / static_cast<double>(rgb.data.size()));
  out.psnr = out.rmse > 0.0 ? std::min(kPsnrCap, -20.0 * std::log10(out.rmse)) : kPsnrCap;
  return out;
}

// ---------------------------------------------------------------------------------------------
// Report

struct EvalConfig {
  int sampler_steps = 50;
  int pairs = 40;
  int whdr_pairs = 100;
  double whdr_delta = 0.1;
  double normal_threshold_deg = 11.25;
  std::uint64_t seed = 0;

  void validate() const {
    if (sampler_steps < 1) throw ConfigError("eval.sampler_steps must be >= 1");
    if (pairs < 1 || whdr_pairs < 1) throw ConfigError("eval pair counts must be >= 1");
    if (!(whdr_delta > 0.0)) throw ConfigError("eval.whdr_delta must be > 0");
    if (!(normal_threshold_deg > 0.0)) throw ConfigError("eval.normal_threshold_deg must be > 0");
  }

  nlohmann::json to_json() const {
    return {{"sampler_steps", sampler_steps}, {"pairs", pairs},         {"whdr_pairs", whdr_pairs},
            {"whdr_delta", whdr_delta},       {"normal_threshold_deg", normal_threshold_deg}, {"seed", seed}};
  }
};

/// Metric names in report order.
inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"whdr", "abs_rel", "delta1", "normal_mean_deg", "normal_below",
                                              "cyclic_rmse", "cyclic_psnr"};
  return names;
}

struct ImageRow {
  std::size_t image_id = 0;
  std::map<std::string, double> pre, post;
  std::array<double, 4> reward_pre{}, reward_post{};
  std::array<bool, 4> reward_valid{};
};

struct EvalReport {
  std::map<std::string, double> pre, post;
  std::array<double, 4> reward_pre{}, reward_post{};
  std::size_t sample_count = 0;
  nlohmann::json config;
  std::vector<ImageRow> rows;

  nlohmann::json to_json() const {
    nlohmann::json rewards = nlohmann::json::object();
    for (Modality m : kModalities)
      rewards[to_string(m)] = {{"pre", reward_pre[int(m)]}, {"post", reward_post[int(m)]}};
    return {{"metrics", {{"pre", pre}, {"post", post}}},
            {"alignment_reward", rewards},
            {"sample_count", sample_count},
            {"config", config}};
  }

  static EvalReport from_json(const nlohmann::json& j) {
    EvalReport r;
    try {
      r.pre = j.at("metrics").at("pre").get<std::map<std::string, double>>();
      r.post = j.at("metrics").at("post").get<std::map<std::string, double>>();
      for (Modality m : kModalities) {
        const auto& e = j.at("alignment_reward").at(to_string(m));
        r.reward_pre[int(m)] = e.at("pre").get<double>();
        r.reward_post[int(m)] = e.at("post").get<double>();
      }
      r.sample_count = j.at("sample_count").get<std::size_t>();
      r.config = j.value("config", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("eval report: ") + e.what(), 0);
    }
    return r;
  }

  /// One row per image: pre and post value of every metric and per-modality reward.
  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "image_id";
    for (const auto& name : metric_names()) os << ',' << name << "_pre," << name << "_post";
    for (Modality m : kModalities) os << ",reward_" << to_string(m) << "_pre,reward_" << to_string(m) << "_post";
    os << '\n';
    for (const ImageRow& row : rows) {
      os << row.image_id;
      for (const auto& name : metric_names()) os << ',' << row.pre.at(name) << ',' << row.post.at(name);
      for (Modality m : kModalities) {
        if (row.reward_valid[int(m)])
          os << ',' << row.reward_pre[int(m)] << ',' << row.reward_post[int(m)];
        else
          os << ",,";
      }
      os << '\n';
    }
    return os.str();
  }

  double reward_delta(Modality m) const { return reward_post[int(m)] - reward_pre[int(m)]; }
};

/// Every scalar finite, WHDR and delta1 in [0,1].
inline bool report_is_valid(const EvalReport& r) {
  for (const auto* side : {&r.pre, &r.post})
    for (const auto& [k, v] : *side) {
      if (!std::isfinite(v)) return false;
      if ((k == "whdr" || k == "delta1") && (v < 0.0 || v > 1.0)) return false;
    }
  for (int m = 0; m < 4; ++m)
    if (!std::isfinite(r.reward_pre[m]) || !std::isfinite(r.reward_post[m])) return false;
  return true;
}

namespace detail {

inline std::map<std::string, double> image_metrics(const IntrinsicStack& pred, const SceneSample& s,
                                                   std::span<const LightnessJudgment> judgments,
                                                   const EvalConfig& cfg) {
  const DepthMetrics dm = depth_metrics(pred.depth, s.gt.depth);
  const NormalMetrics nm = normal_metrics(pred.normals, s.gt.normals, cfg.normal_threshold_deg);
  const Reconstruction rc = cyclic_reconstruction(pred, s.rgb);
  return {{"whdr", whdr(pred.albedo, judgments, cfg.whdr_delta)},
          {"abs_rel", dm.abs_rel},
          {"delta1", dm.delta1},
          {"normal_mean_deg", nm.mean_angle_deg},
          {"normal_below", nm.fraction_below},
          {"cyclic_rmse", rc.rmse},
          {"cyclic_psnr", rc.psnr}};
}

}  // namespace detail

/// Deterministic (ODE) predictions of both nets on `scenes`, scored with the judge service's
/// answers per modality and with ground-truth metrics. `judge` must index the same scenes.
inline EvalReport alignment_report(const VelocityNet& net_pre, const VelocityNet& net_post,
                                   const std::vector<SceneSample>& scenes, JudgeService& judge, const EvalConfig& cfg,
                                   const JudgeConfig& rules = {}) {
  cfg.validate();
  if (scenes.empty()) throw ConfigError("alignment_report: no scenes");
  SamplerConfig sampler;
  sampler.steps = cfg.sampler_steps;
  sampler.noise_level = 0.0;

  const std::size_t n = scenes.size();
  std::vector<std::array<std::vector<JudgedPair>, 4>> judged(n);
  std::vector<std::vector<LightnessJudgment>> lightness(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (Modality m : kModalities) {
      try {
        judged[i][int(m)] = judge.judge_pairs(i, m, cfg.pairs, 0);
      } catch (const SamplingExhausted&) {
      }
    }
    Rng rng = Rng::stream(cfg.seed, "whdr-pairs", i);
    const auto pairs = sample_pairs(rng, scenes[i].rgb.height, scenes[i].rgb.width, nullptr, Modality::Albedo,
                                    cfg.whdr_pairs, rules);
    lightness[i] = lightness_judgments(scenes[i].gt.albedo, pairs, cfg.whdr_delta);
  }

  EvalReport report;
  report.sample_count = n;
  report.config = cfg.to_json();
  report.rows.resize(n);
  parallel_for(static_cast<int>(n), [&](int i) {
    const Field cond = encode_condition(scenes[i].rgb);
    const IntrinsicStack pre = sample_ode(net_pre, cond, sampler, cfg.seed, i);
    const IntrinsicStack post = sample_ode(net_post, cond, sampler, cfg.seed, i);
    ImageRow& row = report.rows[i];
    row.image_id = i;
    row.pre = detail::image_metrics(pre, scenes[i], lightness[i], cfg);
    row.post = detail::image_metrics(post, scenes[i], lightness[i], cfg);
    for (Modality m : kModalities) {
      const auto& jp = judged[i][int(m)];
      if (jp.empty()) continue;
      row.reward_valid[int(m)] = true;
      row.reward_pre[int(m)] = alignment_reward(pre, jp, rules);
      row.reward_post[int(m)] = alignment_reward(post, jp, rules);
    }
  });

  for (const auto& name : metric_names()) {
    double a = 0, b = 0;
    for (const ImageRow& row : report.rows) a += row.pre.at(name), b += row.post.at(name);
    report.pre[name] = a / n;
    report.post[name] = b / n;
  }
  for (Modality m : kModalities) {
    double a = 0, b = 0;
    int cnt = 0;
    for (const ImageRow& row : report.rows)
      if (row.reward_valid[int(m)]) a += row.reward_pre[int(m)], b += row.reward_post[int(m)], ++cnt;
    report.reward_pre[int(m)] = cnt ? a / cnt : 0.0;
    report.reward_post[int(m)] = cnt ? b / cnt : 0.0;
  }
  return report;
}

}  // namespace relflow
