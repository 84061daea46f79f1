#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "relflow/core/error.hpp"
#include "relflow/core/rng.hpp"
#include "relflow/scenegen.hpp"

namespace relflow {

enum class Modality { Depth = 0, Normals = 1, Irradiance = 2, Albedo = 3 };

inline constexpr std::array<Modality, 4> kModalities{Modality::Depth, Modality::Normals, Modality::Irradiance,
                                                     Modality::Albedo};

inline const char* to_string(Modality m) {
  switch (m) {
    case Modality::Depth: return "depth";
    case Modality::Normals: return "normals";
    case Modality::Irradiance: return "irradiance";
    case Modality::Albedo: return "albedo";
  }
  return "?";
}

inline Modality parse_modality(std::string_view s) {
  for (Modality m : kModalities)
    if (s == to_string(m)) return m;
  throw ConfigError("unknown modality '" + std::string(s) + "'");
}

struct Pixel {
  int row = 0;
  int col = 0;
  bool operator==(const Pixel&) const = default;
};

struct PointPair {
  Pixel p1;
  Pixel p2;
  Modality modality = Modality::Depth;
  bool operator==(const PointPair&) const = default;
};

/// Depth: FirstGreater means p1 is closer. Normals: p1 is more front-facing.
/// Irradiance: p1 is more illuminated. Albedo uses Same / Different.
enum class Label { FirstGreater, SecondGreater, Same, Different };

inline const char* to_string(Label l) {
  switch (l) {
    case Label::FirstGreater: return "first";
    case Label::SecondGreater: return "second";
    case Label::Same: return "same";
    case Label::Different: return "different";
  }
  return "?";
}

inline Label parse_label(std::string_view s) {
  for (Label l : {Label::FirstGreater, Label::SecondGreater, Label::Same, Label::Different})
    if (s == to_string(l)) return l;
  throw ConfigError("unknown label '" + std::string(s) + "'");
}

inline bool label_legal_for(Label l, Modality m) {
  const bool binary_order = l == Label::FirstGreater || l == Label::SecondGreater;
  return m == Modality::Albedo ? !binary_order : binary_order;
}

/// Unique opposite label within the modality's binary label set.
inline Label opposite(Label l) {
  switch (l) {
    case Label::FirstGreater: return Label::SecondGreater;
    case Label::SecondGreater: return Label::FirstGreater;
    case Label::Same: return Label::Different;
    case Label::Different: return Label::Same;
  }
  return l;
}

struct Judgment {
  Label label = Label::Same;
  double confidence = 1.0;
};

struct JudgedPair {
  PointPair pair;
  Judgment judgment;
};

enum class JudgeKind { Oracle, Noisy, External };

inline JudgeKind parse_judge_kind(std::string_view s) {
  if (s == "oracle") return JudgeKind::Oracle;
  if (s == "noisy") return JudgeKind::Noisy;
  if (s == "external") return JudgeKind::External;
  throw ConfigError("unknown judge kind '" + std::string(s) + "'");
}

struct JudgeConfig {
  JudgeKind kind = JudgeKind::Oracle;
  /// Per-modality label flip probability for the noisy judge, indexed by Modality.
  std::array<double, 4> flip_probability{0.038, 0.065, 0.124, 0.106};
  std::string external_command;
  bool external_attach_image = false;
  double external_timeout_s = 10.0;
  /// CIE76 colour difference above which two albedo samples count as different materials.
  double albedo_delta_e = 10.0;
  /// Relative-difference ratio under which depth / normal / irradiance pairs are ambiguous.
  double exclusion_ratio = 0.02;
  /// Floor on albedo luminance in the irradiance ratio.
  double division_floor = 1e-4;
  int retry_budget_per_pair = 50;

  void validate() const {
    for (double p : flip_probability)
      if (!(p >= 0.0 && p <= 0.5)) throw ConfigError("judge flip probabilities must lie in [0, 0.5]");
    if (!(albedo_delta_e > 0.0)) throw ConfigError("judge.albedo_delta_e must be > 0");
    if (!(exclusion_ratio >= 0.0)) throw ConfigError("judge.exclusion_ratio must be >= 0");
    if (!(division_floor > 0.0)) throw ConfigError("judge.division_floor must be > 0");
    if (retry_budget_per_pair < 1) throw ConfigError("judge.retry_budget_per_pair must be >= 1");
    if (kind == JudgeKind::External && external_command.empty())
      throw ConfigError("external judge requires a command");
  }
};

/// Noisy-judge flip probabilities matching a per-modality accuracy (depth, normals, albedo, irradiance).
inline std::array<double, 4> flips_from_accuracy(double depth, double normals, double albedo, double irradiance) {
  std::array<double, 4> p{};
  p[static_cast<int>(Modality::Depth)] = 1.0 - depth;
  p[static_cast<int>(Modality::Normals)] = 1.0 - normals;
  p[static_cast<int>(Modality::Albedo)] = 1.0 - albedo;
  p[static_cast<int>(Modality::Irradiance)] = 1.0 - irradiance;
  return p;
}

// ---------------------------------------------------------------------------------------------
// Colour helpers

inline double luminance709(double r, double g, double b) { return 0.2126 * r + 0.7152 * g + 0.0722 * b; }

struct Lab {
  double l, a, b;
};

/// Linear RGB (sRGB primaries) to CIE L*a*b* under D65.
inline Lab linear_rgb_to_lab(double r, double g, double b) {
  const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
  auto f = [](double t) {
    constexpr double eps = 216.0 / 24389.0, kappa = 24389.0 / 27.0;
    return t > eps ? std::cbrt(t) : (kappa * t + 16.0) / 116.0;
  };
  const double fx = f(x / 0.95047), fy = f(y / 1.0), fz = f(z / 1.08883);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

inline double delta_e76(std::span<const float> c1, std::span<const float> c2) {
  const Lab a = linear_rgb_to_lab(c1[0], c1[1], c1[2]);
  const Lab b = linear_rgb_to_lab(c2[0], c2[1], c2[2]);
  return std::sqrt((a.l - b.l) * (a.l - b.l) + (a.a - b.a) * (a.a - b.a) + (a.b - b.b) * (a.b - b.b));
}

// ---------------------------------------------------------------------------------------------
// Relation rules

inline bool in_bounds(const IntrinsicStack& s, Pixel p) {
  return p.row >= 0 && p.col >= 0 && p.row < s.height() && p.col < s.width();
}

/// Luminance of the Lambertian re-rendering over the albedo luminance. Equals the irradiance
/// wherever the albedo is not black.
inline double irradiance_ratio(const IntrinsicStack& s, Pixel p, double division_floor) {
  const double e = s.irradiance(p.row, p.col);
  double rgb[3], alb[3];
  for (int k = 0; k < 3; ++k) {
    alb[k] = s.albedo(p.row, p.col, k);
    rgb[k] = static_cast<float>(std::clamp(alb[k] * e, 0.0, 1.0));
  }
  return luminance709(rgb[0], rgb[1], rgb[2]) / std::max(luminance709(alb[0], alb[1], alb[2]), division_floor);
}

/// Scalar compared by the ordinal rules; larger means "first greater" except for depth.
inline double ordinal_value(const IntrinsicStack& s, Modality m, Pixel p, double division_floor) {
  switch (m) {
    case Modality::Depth: return s.depth(p.row, p.col);
    case Modality::Normals: return s.normals(p.row, p.col, 2);
    case Modality::Irradiance: return irradiance_ratio(s, p, division_floor);
    case Modality::Albedo: {
      const auto c = s.albedo.pixel(p.row, p.col);
      return luminance709(c[0], c[1], c[2]);
    }
  }
  return 0.0;
}

inline double relative_gap(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale > 0.0 ? std::abs(a - b) / scale : 0.0;
}

/// Analytic relation for a pair on a ground-truth or predicted stack. nullopt means ambiguous.
inline std::optional<Judgment> derive_relation(const IntrinsicStack& s, const PointPair& pair, const JudgeConfig& cfg) {
  if (!in_bounds(s, pair.p1) || !in_bounds(s, pair.p2)) throw std::out_of_range("derive_relation: pixel out of bounds");
  if (pair.modality == Modality::Albedo) {
    const double de = delta_e76(s.albedo.pixel(pair.p1.row, pair.p1.col), s.albedo.pixel(pair.p2.row, pair.p2.col));
    return Judgment{de > cfg.albedo_delta_e ? Label::Different : Label::Same, 1.0};
  }
  const double v1 = ordinal_value(s, pair.modality, pair.p1, cfg.division_floor);
  const double v2 = ordinal_value(s, pair.modality, pair.p2, cfg.division_floor);
  if (!std::isfinite(v1) || !std::isfinite(v2) || v1 == v2) return std::nullopt;
  if (relative_gap(v1, v2) < cfg.exclusion_ratio) return std::nullopt;
  const bool first = pair.modality == Modality::Depth ? v1 < v2 : v1 > v2;
  return Judgment{first ? Label::FirstGreater : Label::SecondGreater, 1.0};
}

/// Equal-width bin index of a value in [lo, hi].
inline int value_bin(double v, int bins, double lo = 0.0, double hi = 1.0) {
  const double u = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
  return std::min(bins - 1, static_cast<int>(std::floor(u * bins)));
}

/// Relation implied by discretizing each point into `bins` ordered bins over [0, 1]
/// (albedo uses luminance). Points sharing a bin are ambiguous.
inline std::optional<Judgment> derive_binned_relation(const IntrinsicStack& s, const PointPair& pair, int bins = 5,
                                                      double division_floor = 1e-4) {
  if (bins < 2) throw ConfigError("derive_binned_relation: bins must be >= 2");
  if (!in_bounds(s, pair.p1) || !in_bounds(s, pair.p2))
    throw std::out_of_range("derive_binned_relation: pixel out of bounds");
  const int b1 = value_bin(ordinal_value(s, pair.modality, pair.p1, division_floor), bins);
  const int b2 = value_bin(ordinal_value(s, pair.modality, pair.p2, division_floor), bins);
  if (b1 == b2) return std::nullopt;
  if (pair.modality == Modality::Albedo) return Judgment{Label::Different, 1.0};
  const bool first = pair.modality == Modality::Depth ? b1 < b2 : b1 > b2;
  return Judgment{first ? Label::FirstGreater : Label::SecondGreater, 1.0};
}

// ---------------------------------------------------------------------------------------------
// Pair sampling

struct DistanceBounds {
  double min = 2.0;
  double max = 0.0;
};

/// Pair-distance limits of 20 and 350 pixels at 512 rows, scaled linearly to `height`.
inline DistanceBounds pair_distance_bounds(int height) {
  return {std::max(2.0, std::ceil(20.0 * height / 512.0)), 350.0 * height / 512.0};
}

inline double pixel_distance(Pixel a, Pixel b) { return std::hypot(double(a.row - b.row), double(a.col - b.col)); }

/// Draws up to `n` pairs within the distance bounds. When `gt` is given, pairs whose relation is
/// ambiguous on it are rejected and redrawn. Throws SamplingExhausted when nothing usable is found.
inline std::vector<PointPair> sample_pairs(Rng& rng, int height, int width, const IntrinsicStack* gt, Modality modality,
                                           int n, const JudgeConfig& cfg) {
  if (n < 1) throw ConfigError("sample_pairs: n must be >= 1");
  const DistanceBounds bounds = pair_distance_bounds(height);
  if (bounds.min > std::hypot(double(height - 1), double(width - 1)))
    throw ConfigError("sample_pairs: image too small for the minimum pair distance");
  std::vector<PointPair> pairs;
  pairs.reserve(n);
  const long budget = static_cast<long>(cfg.retry_budget_per_pair) * n;
  for (long attempt = 0; attempt < budget && static_cast<int>(pairs.size()) < n; ++attempt) {
    PointPair p{{rng.uniform_int(0, height - 1), rng.uniform_int(0, width - 1)},
                {rng.uniform_int(0, height - 1), rng.uniform_int(0, width - 1)},
                modality};
    const double d = pixel_distance(p.p1, p.p2);
    if (d < bounds.min || d > bounds.max) continue;
    if (gt != nullptr && !derive_relation(*gt, p, cfg)) continue;
    pairs.push_back(p);
  }
  if (pairs.empty())
    throw SamplingExhausted(std::string("no unambiguous ") + to_string(modality) + " pair within the retry budget");
  return pairs;
}

inline std::vector<PointPair> sample_pairs(Rng& rng, const IntrinsicStack& gt, Modality modality, int n,
                                           const JudgeConfig& cfg) {
  return sample_pairs(rng, gt.height(), gt.width(), &gt, modality, n, cfg);
}

// ---------------------------------------------------------------------------------------------
// Judges

/// Identifies one query so stochastic judges can key their randomness on it.
struct QueryKey {
  std::uint64_t image_id = 0;
  std::uint64_t round = 0;
  std::uint64_t index = 0;
};

/// Answers one relative question about a scene.
class PairJudge {
 public:
  virtual ~PairJudge() = default;
  virtual Judgment query(const SceneSample& sample, const PointPair& pair, const QueryKey& key) = 0;
  /// Whether pair sampling may consult ground truth to drop ambiguous pairs.
  virtual bool reads_ground_truth() const = 0;
  /// False once the judge can no longer answer (e.g. its subprocess died).
  virtual bool alive() const { return true; }
};

class OracleJudge final : public PairJudge {
 public:
  explicit OracleJudge(JudgeConfig cfg) : cfg_(std::move(cfg)) {}

  Judgment query(const SceneSample& sample, const PointPair& pair, const QueryKey&) override {
    auto j = derive_relation(sample.gt, pair, cfg_);
    if (!j) throw std::logic_error("oracle judge queried on an ambiguous pair");
    return *j;
  }
  bool reads_ground_truth() const override { return true; }

 private:
  JudgeConfig cfg_;
};

/// Oracle answer flipped to the opposite label with a per-modality probability.
class NoisyJudge final : public PairJudge {
 public:
  NoisyJudge(JudgeConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {}

  Judgment query(const SceneSample& sample, const PointPair& pair, const QueryKey& key) override {
    auto j = derive_relation(sample.gt, pair, cfg_);
    if (!j) throw std::logic_error("noisy judge queried on an ambiguous pair");
    const double p = cfg_.flip_probability[static_cast<int>(pair.modality)];
    Rng rng = Rng::stream(seed_, "noisy-judge", key.image_id, key.round, key.index,
                          static_cast<int>(pair.modality));
    Judgment out{j->label, 1.0 - p};
    if (rng.uniform() < p) out.label = opposite(j->label);
    return out;
  }
  bool reads_ground_truth() const override { return true; }

 private:
  JudgeConfig cfg_;
  std::uint64_t seed_;
};

/// Source of judged pairs for the fine-tuning loop. The loop only ever sees RGB; everything that
/// needs ground truth stays behind this interface.
class JudgeService {
 public:
  virtual ~JudgeService() = default;
  /// Samples up to `n` pairs on image `image_id` and returns the judge's answer for each.
  virtual std::vector<JudgedPair> judge_pairs(std::size_t image_id, Modality m, int n, std::uint64_t round) = 0;
  virtual bool alive() const { return true; }
};

/// Judge service over an in-memory scene set. Pair sampling uses ground truth only when the
/// underlying judge is allowed to.
class SceneJudgeService final : public JudgeService {
 public:
  SceneJudgeService(std::vector<SceneSample> scenes, std::unique_ptr<PairJudge> judge, JudgeConfig cfg,
                    std::uint64_t seed)
      : scenes_(std::move(scenes)), judge_(std::move(judge)), cfg_(std::move(cfg)), seed_(seed) {}

  std::vector<JudgedPair> judge_pairs(std::size_t image_id, Modality m, int n, std::uint64_t round) override {
    const SceneSample& s = scenes_.at(image_id);
    Rng rng = Rng::stream(seed_, "pairs", image_id, round, static_cast<int>(m));
    const IntrinsicStack* gt = judge_->reads_ground_truth() ? &s.gt : nullptr;
    const auto pairs = sample_pairs(rng, s.rgb.height, s.rgb.width, gt, m, n, cfg_);
    std::vector<JudgedPair> out;
    out.reserve(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i)
      out.push_back({pairs[i], judge_->query(s, pairs[i], QueryKey{image_id, round, i})});
    return out;
  }

  bool alive() const override { return judge_->alive(); }
  const std::vector<SceneSample>& scenes() const noexcept { return scenes_; }

 private:
  std::vector<SceneSample> scenes_;
  std::unique_ptr<PairJudge> judge_;
  JudgeConfig cfg_;
  std::uint64_t seed_;
};

/// Wraps a service and remembers every answer it gave.
class RecordingJudgeService final : public JudgeService {
 public:
  struct Entry {
    std::size_t image_id;
    Modality modality;
    int n;
    std::uint64_t round;
    std::vector<JudgedPair> answers;
  };

  explicit RecordingJudgeService(JudgeService& inner) : inner_(inner) {}

  std::vector<JudgedPair> judge_pairs(std::size_t image_id, Modality m, int n, std::uint64_t round) override {
    auto out = inner_.judge_pairs(image_id, m, n, round);
    log_.push_back({image_id, m, n, round, out});
    return out;
  }

  const std::vector<Entry>& log() const noexcept { return log_; }

 private:
  JudgeService& inner_;
  std::vector<Entry> log_;
};

/// Replays recorded answers. Holds no scene data at all.
class ReplayJudgeService final : public JudgeService {
 public:
  explicit ReplayJudgeService(std::vector<RecordingJudgeService::Entry> log) : log_(std::move(log)) {}

  std::vector<JudgedPair> judge_pairs(std::size_t image_id, Modality m, int n, std::uint64_t round) override {
    for (const auto& e : log_)
      if (e.image_id == image_id && e.modality == m && e.n == n && e.round == round) return e.answers;
    throw JudgeUnavailable("no cached answer for this query");
  }

 private:
  std::vector<RecordingJudgeService::Entry> log_;
};

}  // namespace relflow
