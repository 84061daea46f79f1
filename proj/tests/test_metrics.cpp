#include <gtest/gtest.h>

#include <numbers>

#include "relflow/dataset.hpp"
#include "relflow/grpo.hpp"
#include "relflow/metrics.hpp"

using namespace relflow;

namespace {

ImageF random_albedo(Rng& rng, int h, int w) {
  ImageF a(h, w, 3);
  for (float& v : a.data) v = float(rng.uniform(0.05, 0.95));
  return a;
}

std::vector<PointPair> all_pairs(int h, int w) {
  std::vector<PointPair> out;
  for (int i = 0; i < h * w; ++i)
    for (int j = i + 1; j < h * w; ++j)
      out.push_back({{i / w, i % w}, {j / w, j % w}, Modality::Albedo});
  return out;
}

/// Second implementation of WHDR: labels as integers, luminance recomputed from scratch.
double whdr_recount(const ImageF& pred, const ImageF& gt, const std::vector<PointPair>& pairs, double delta) {
  auto lum = [](const ImageF& a, Pixel p) {
    return 0.2126 * a(p.row, p.col, 0) + 0.7152 * a(p.row, p.col, 1) + 0.0722 * a(p.row, p.col, 2);
  };
  auto label = [&](double l1, double l2) {
    if (l2 * (1 + delta) < l1) return 2;
    if (l1 * (1 + delta) < l2) return 1;
    return 0;
  };
  int wrong = 0;
  for (const auto& p : pairs)
    wrong += label(lum(pred, p.p1), lum(pred, p.p2)) != label(lum(gt, p.p1), lum(gt, p.p2));
  return double(wrong) / pairs.size();
}

/// Smooth surface sampled on a grid, with normals from its exact gradient.
struct Surface {
  ImageF depth, normals;
};

Surface smooth_surface(Rng& rng, int res, double dpp) {
  const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1), fx = rng.uniform(0.05, 0.25),
               fy = rng.uniform(0.05, 0.25), px = rng.uniform(0, 6), py = rng.uniform(0, 6), gx = rng.uniform(-0.3, 0.3);
  Surface s{ImageF(res, res, 1), ImageF(res, res, 3)};
  for (int r = 0; r < res; ++r)
    for (int c = 0; c < res; ++c) {
      // Depth in pixel units, scaled to depth units by dpp.
      const double d = a * std::sin(fx * c + px) + b * std::cos(fy * r + py) + gx * c;
      const double dx = a * fx * std::cos(fx * c + px) + gx, dy = -b * fy * std::sin(fy * r + py);
      s.depth(r, c, 0) = float(0.5 + dpp * d);
      const double len = std::sqrt(dx * dx + dy * dy + 1);
      s.normals(r, c, 0) = float(dx / len);
      s.normals(r, c, 1) = float(dy / len);
      s.normals(r, c, 2) = float(1 / len);
    }
  return s;
}

double rmse_up_to_constant(const Field& est, const ImageF& truth) {
  double me = 0, mt = 0;
  const std::size_t n = truth.data.size();
  for (std::size_t i = 0; i < n; ++i) me += est.data[i], mt += truth.data[i];
  me /= n, mt /= n;
  double se = 0;
  for (std::size_t i = 0; i < n; ++i) se += std::pow((est.data[i] - me) - (truth.data[i] - mt), 2);
  return std::sqrt(se / n);
}

/// Integrates normals with a plain dense normal-equation solve over the full grid.
Eigen::VectorXd dense_integration(const ImageF& normals, double scale) {
  const int h = normals.height, w = normals.width, n = h * w;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  auto grad = [&](int r, int c, int axis) { return scale * normals(r, c, axis) / normals(r, c, 2); };
  auto add = [&](int p, int q, double g) {
    // (x_q - x_p - g)^2
    a(p, p) += 1, a(q, q) += 1, a(p, q) -= 1, a(q, p) -= 1;
    b(q) += g, b(p) -= g;
  };
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (c + 1 < w) add(r * w + c, r * w + c + 1, 0.5 * (grad(r, c, 0) + grad(r, c + 1, 0)));
      if (r + 1 < h) add(r * w + c, (r + 1) * w + c, 0.5 * (grad(r, c, 1) + grad(r + 1, c, 1)));
    }
  a.array() += 1.0 / n;
  Eigen::VectorXd x = a.ldlt().solve(b);
  return x.array() - x.mean();
}

}  // namespace

TEST(Whdr, TruthScoresZeroAndInversionScoresOne) {
  Rng rng(1);
  const ImageF gt = random_albedo(rng, 8, 8);
  const auto pairs = all_pairs(8, 8);
  for (double delta : {0.1, 0.2}) {
    auto judgments = lightness_judgments(gt, pairs, delta);
    EXPECT_EQ(whdr(gt, judgments, delta), 0.0);
    std::vector<LightnessJudgment> inverted;
    for (auto j : judgments) {
      if (j.label == Lightness::Equal) continue;
      j.label = j.label == Lightness::FirstDarker ? Lightness::SecondDarker : Lightness::FirstDarker;
      inverted.push_back(j);
    }
    ASSERT_FALSE(inverted.empty());
    EXPECT_EQ(whdr(gt, inverted, delta), 1.0);
  }
}

TEST(Whdr, MatchesExhaustiveRecount) {
  Rng rng(2);
  const auto pairs = all_pairs(8, 8);
  for (int trial = 0; trial < 20; ++trial) {
    const ImageF gt = random_albedo(rng, 8, 8), pred = random_albedo(rng, 8, 8);
    for (double delta : {0.1, 0.2}) {
      const auto judgments = lightness_judgments(gt, pairs, delta);
      EXPECT_NEAR(whdr(pred, judgments, delta), whdr_recount(pred, gt, pairs, delta), 1e-15);
    }
  }
}

TEST(Whdr, InvariantToUniformScaling) {
  Rng rng(3);
  const auto pairs = all_pairs(6, 6);
  const ImageF gt = random_albedo(rng, 6, 6), pred = random_albedo(rng, 6, 6);
  const auto judgments = lightness_judgments(gt, pairs, 0.1);
  ImageF scaled = pred;
  for (float& v : scaled.data) v *= 0.5f;
  EXPECT_EQ(whdr(pred, judgments, 0.1), whdr(scaled, judgments, 0.1));
}

TEST(Whdr, RejectsBadInput) {
  Rng rng(4);
  const ImageF gt = random_albedo(rng, 4, 4);
  const auto judgments = lightness_judgments(gt, all_pairs(4, 4), 0.1);
  EXPECT_THROW(whdr(gt, std::vector<LightnessJudgment>{}, 0.1), ConfigError);
  EXPECT_THROW(whdr(gt, judgments, 0.0), ConfigError);
  EXPECT_EQ(lightness_relation(1.2, 1.0, 0.1), Lightness::SecondDarker);
  EXPECT_EQ(lightness_relation(1.0, 1.2, 0.1), Lightness::FirstDarker);
  EXPECT_EQ(lightness_relation(1.05, 1.0, 0.1), Lightness::Equal);
}

TEST(DepthMetrics, IdentityAndAffineInvariance) {
  Rng rng(5);
  ImageF gt(8, 8, 1);
  for (float& v : gt.data) v = float(rng.uniform(0.2, 1.0));
  const DepthMetrics same = depth_metrics(gt, gt);
  EXPECT_NEAR(same.abs_rel, 0.0, 1e-12);
  EXPECT_EQ(same.delta1, 1.0);
  for (auto [s, t] : {std::pair{2.0, 0.1}, {0.3, -0.05}, {7.0, 3.0}}) {
    ImageF pred = gt;
    for (std::size_t i = 0; i < pred.data.size(); ++i) pred.data[i] = float(s * gt.data[i] + t);
    const DepthMetrics m = depth_metrics(pred, gt);
    EXPECT_NEAR(m.abs_rel, 0.0, 1e-6);
    EXPECT_EQ(m.delta1, 1.0);
    EXPECT_EQ(m.clamped, 0);
  }
}

TEST(DepthMetrics, MatchesFormulas) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    ImageF gt(8, 8, 1), pred(8, 8, 1);
    for (float& v : gt.data) v = float(rng.uniform(0.2, 1.0));
    for (float& v : pred.data) v = float(rng.uniform(-1.0, 1.0));
    // Normal equations of min sum (s p + t - g)^2 solved by Cramer's rule.
    double n = 64, sp = 0, sg = 0, spp = 0, spg = 0;
    for (int i = 0; i < 64; ++i) {
      const double p = pred.data[i], g = gt.data[i];
      sp += p, sg += g, spp += p * p, spg += p * g;
    }
    const double s = (n * spg - sp * sg) / (n * spp - sp * sp), t = (sg - s * sp) / n;
    double abs_rel = 0;
    int within = 0, clamped = 0;
    for (int i = 0; i < 64; ++i) {
      double a = s * pred.data[i] + t;
      if (a <= 0) a = 1e-6, ++clamped;
      abs_rel += std::abs(a - gt.data[i]) / gt.data[i];
      within += std::max(a / gt.data[i], gt.data[i] / a) < 1.25;
    }
    const DepthMetrics m = depth_metrics(pred, gt);
    EXPECT_NEAR(m.abs_rel, abs_rel / 64, 1e-9);
    EXPECT_NEAR(m.delta1, within / 64.0, 1e-12);
    EXPECT_EQ(m.clamped, clamped);
  }
}

TEST(DepthMetrics, RejectsNonPositiveTruth) {
  ImageF gt(2, 2, 1, 0.5f), pred(2, 2, 1, 0.5f);
  gt.data[3] = 0.0f;
  EXPECT_THROW(depth_metrics(pred, gt), ConfigError);
  EXPECT_THROW(depth_metrics(ImageF(3, 2, 1, 0.5f), ImageF(2, 2, 1, 0.5f)), ShapeError);
}

TEST(NormalMetrics, Examples) {
  ImageF gt(4, 4, 3), orth(4, 4, 3);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) gt(r, c, 2) = 1, orth(r, c, 0) = 1;
  const NormalMetrics same = normal_metrics(gt, gt);
  EXPECT_EQ(same.mean_angle_deg, 0.0);
  EXPECT_EQ(same.fraction_below, 1.0);
  const NormalMetrics o = normal_metrics(orth, gt);
  EXPECT_NEAR(o.mean_angle_deg, 90.0, 1e-12);
  EXPECT_EQ(o.fraction_below, 0.0);
  ImageF zero(4, 4, 3);
  const NormalMetrics z = normal_metrics(zero, gt);
  EXPECT_EQ(z.degenerate, 16);
  EXPECT_EQ(z.mean_angle_deg, 90.0);
}

TEST(NormalMetrics, MatchesScalarRecomputationAndIgnoresLength) {
  Rng rng(7);
  ImageF gt(6, 6, 3), pred(6, 6, 3);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 6; ++c) {
      double v[3] = {rng.normal(), rng.normal(), std::abs(rng.normal()) + 0.1};
      const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      for (int k = 0; k < 3; ++k) gt(r, c, k) = float(v[k] / len), pred(r, c, k) = float(rng.normal());
    }
  double sum = 0;
  int below = 0;
  std::vector<double> angles;
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 6; ++c) {
      double dot = 0, pp = 0;
      for (int k = 0; k < 3; ++k) dot += double(pred(r, c, k)) * gt(r, c, k), pp += double(pred(r, c, k)) * pred(r, c, k);
      const double ang = std::acos(std::clamp(dot / std::sqrt(pp), -1.0, 1.0)) * 180 / std::numbers::pi;
      sum += ang;
      below += ang < 11.25;
      angles.push_back(ang);
    }
  const NormalMetrics m = normal_metrics(pred, gt);
  EXPECT_NEAR(m.mean_angle_deg, sum / 36, 1e-9);
  EXPECT_EQ(m.fraction_below, below / 36.0);
  ImageF scaled = pred;
  for (float& v : scaled.data) v *= 4.0f;
  EXPECT_NEAR(normal_metrics(scaled, gt).mean_angle_deg, m.mean_angle_deg, 1e-9);
  int below30 = 0;
  for (double a : angles) below30 += a < 30.0;
  EXPECT_EQ(normal_metrics(pred, gt, 30.0).fraction_below, below30 / 36.0);
}

TEST(CyclicReconstruction, Examples) {
  SceneGenConfig sc;
  sc.resolution = 16;
  const SceneSample s = generate_scene(3, sc);
  const Reconstruction exact = cyclic_reconstruction(s.gt, s.rgb);
  EXPECT_LT(exact.rmse, 1e-6);
  if (exact.rmse == 0.0) {
    EXPECT_EQ(exact.psnr, kPsnrCap);
  }
  EXPECT_LE(exact.psnr, kPsnrCap);

  IntrinsicStack black = s.gt;
  std::fill(black.albedo.data.begin(), black.albedo.data.end(), 0.0f);
  double sq = 0;
  for (float v : s.rgb.data) sq += double(v) * v;
  EXPECT_NEAR(cyclic_reconstruction(black, s.rgb).rmse, std::sqrt(sq / s.rgb.data.size()), 1e-12);

  ImageF residual(16, 16, 3, 0.25f);
  const Reconstruction with_res = cyclic_reconstruction(black, s.rgb, &residual);
  EXPECT_NE(with_res.rmse, cyclic_reconstruction(black, s.rgb).rmse);
}

TEST(Poisson, ConstantNormalsGiveFlatDepth) {
  ImageF n(8, 8, 3);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) n(r, c, 2) = 1;
  const PoissonResult res = poisson_integrate(n);
  EXPECT_EQ(res.coverage, 1.0);
  for (double v : res.depth.data) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Poisson, PlaneIsRecoveredExactly) {
  for (auto [a, b, c] : {std::tuple{0.2, -0.1, 0.9}, {-0.5, 0.3, 0.6}, {0.0, 0.4, 0.8}}) {
    ImageF n(32, 32, 3), truth(32, 32, 1);
    const double len = std::sqrt(a * a + b * b + c * c);
    for (int r = 0; r < 32; ++r)
      for (int col = 0; col < 32; ++col) {
        n(r, col, 0) = float(a / len), n(r, col, 1) = float(b / len), n(r, col, 2) = float(c / len);
        truth(r, col, 0) = float(double(n(r, col, 0)) / n(r, col, 2) * col + double(n(r, col, 1)) / n(r, col, 2) * r);
      }
    EXPECT_LT(rmse_up_to_constant(poisson_integrate(n).depth, truth), 1e-3);
  }
}

TEST(Poisson, SmoothSurfacesAreRecovered) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const double dpp = default_depth_per_pixel(32);
    const Surface s = smooth_surface(rng, 32, dpp);
    EXPECT_LT(rmse_up_to_constant(poisson_integrate(s.normals, dpp).depth, s.depth), 1e-3) << trial;
  }
}

TEST(Poisson, ConjugateGradientPathAgreesWithDenseSolve) {
  Rng rng(9);
  const double dpp = default_depth_per_pixel(72);
  const Surface big = smooth_surface(rng, 72, dpp);
  EXPECT_LT(rmse_up_to_constant(poisson_integrate(big.normals, dpp).depth, big.depth), 1e-3);
  const Surface small = smooth_surface(rng, 20, 1.0);
  const auto ours = poisson_integrate(small.normals);
  const Eigen::VectorXd ref = dense_integration(small.normals, 1.0);
  for (int i = 0; i < 400; ++i) EXPECT_NEAR(ours.depth.data[i], ref[i], 1e-8);
}

TEST(Poisson, MasksGrazingNormals) {
  ImageF n(6, 6, 3);
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 6; ++c) n(r, c, 2) = 1;
  for (int r = 0; r < 6; ++r) n(r, 3, 2) = 0, n(r, 3, 0) = 1;
  const PoissonResult res = poisson_integrate(n);
  EXPECT_NEAR(res.coverage, 30.0 / 36.0, 1e-12);
  for (int r = 0; r < 6; ++r) EXPECT_FALSE(res.valid[r * 6 + 3]);
}

TEST(DnReward, MatchesDenseOracleOnSmoothSurfaces) {
  Rng rng(10);
  const double dpp = default_depth_per_pixel(24);
  for (int trial = 0; trial < 5; ++trial) {
    const Surface s = smooth_surface(rng, 24, dpp);
    IntrinsicStack pred(24, 24);
    pred.depth = s.depth;
    pred.normals = s.normals;
    Rng noise(trial);
    for (float& v : pred.depth.data) v += float(0.01 * noise.normal());
    const Eigen::VectorXd integ = dense_integration(s.normals, dpp);
    std::vector<double> diff(integ.size());
    for (int i = 0; i < integ.size(); ++i) diff[i] = double(pred.depth.data[i]) - integ[i];
    std::vector<double> sorted = diff;
    std::sort(sorted.begin(), sorted.end());
    const double med = 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
    double sum = 0;
    for (double d : diff) sum += std::abs(d - med);
    EXPECT_NEAR(dn_consistency_reward(pred), -sum / diff.size(), 1e-6);
  }
}

TEST(EvalReport, RoundTripAndValidity) {
  EvalReport r;
  for (const auto& name : metric_names()) r.pre[name] = 0.25, r.post[name] = 0.5;
  r.reward_pre = {0.5, 0.6, 0.7, 0.8};
  r.reward_post = {0.55, 0.65, 0.75, 0.85};
  r.sample_count = 3;
  r.config = EvalConfig{}.to_json();
  const EvalReport back = EvalReport::from_json(nlohmann::json::parse(r.to_json().dump()));
  EXPECT_EQ(back.pre, r.pre);
  EXPECT_EQ(back.post, r.post);
  EXPECT_EQ(back.reward_pre, r.reward_pre);
  EXPECT_EQ(back.reward_post, r.reward_post);
  EXPECT_EQ(back.sample_count, 3u);
  EXPECT_NEAR(back.reward_delta(Modality::Albedo), 0.05, 1e-12);
  EXPECT_TRUE(report_is_valid(back));
  r.post["whdr"] = 1.5;
  EXPECT_FALSE(report_is_valid(r));
  EXPECT_THROW(EvalReport::from_json(nlohmann::json::parse(R"({"metrics": {}})")), FormatError);
}

TEST(AlignmentReport, SameNetGivesZeroDeltas) {
  SceneGenConfig sc;
  sc.resolution = 16;
  const auto scenes = generate_dataset(12, 3, sc);
  Architecture arch;
  arch.layers = {{4, 1}, {kStateChannels, 1}};
  arch.zero_init_last = false;
  const VelocityNet net = VelocityNet::initialized(arch, 3);
  SceneJudgeService judge(scenes, std::make_unique<OracleJudge>(JudgeConfig{}), {}, 1);
  EvalConfig ec;
  ec.sampler_steps = 5;
  const EvalReport r = alignment_report(net, net, scenes, judge, ec);
  EXPECT_EQ(r.pre, r.post);
  EXPECT_EQ(r.reward_pre, r.reward_post);
  EXPECT_EQ(r.sample_count, 3u);
  EXPECT_TRUE(report_is_valid(r));
  const std::string csv = r.to_csv();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_EQ(csv.rfind("image_id,whdr_pre,whdr_post", 0), 0u);

  SceneJudgeService judge2(scenes, std::make_unique<OracleJudge>(JudgeConfig{}), {}, 1);
  const EvalReport again = alignment_report(net, net, scenes, judge2, ec);
  EXPECT_EQ(again.to_json(), r.to_json());
}
