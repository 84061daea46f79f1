// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only if all pass.
// Output files go to ./acceptance_out (GRPO logs, eval reports, CLI determinism runs).

#include <sys/wait.h>
#include <zlib.h>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "relflow.hpp"

using namespace relflow;
namespace fs = std::filesystem;

namespace {

const fs::path kOut = "acceptance_out";

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::map<int, std::pair<bool, std::string>> verdicts;

void verdict(int id, bool pass, const std::string& what) { verdicts[id] = {pass, what}; }

void detail(const std::string& s) {
  std::printf("    %s\n", s.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---------------------------------------------------------------------------------------------
// 1. Relation rules against a brute-force re-implementation

namespace brute {

enum Rel { Ambiguous, First, Second, Same, Different };

double lum(double r, double g, double b) { return 0.2126 * r + 0.7152 * g + 0.0722 * b; }

std::array<double, 3> lab(double r, double g, double b) {
  static constexpr double m[3][3] = {{0.4124564, 0.3575761, 0.1804375},
                                     {0.2126729, 0.7151522, 0.0721750},
                                     {0.0193339, 0.1191920, 0.9503041}};
  static constexpr double white[3] = {0.95047, 1.0, 1.08883};
  const double d = 6.0 / 29.0;
  double f[3];
  for (int i = 0; i < 3; ++i) {
    const double t = (m[i][0] * r + m[i][1] * g + m[i][2] * b) / white[i];
    f[i] = t > d * d * d ? std::pow(t, 1.0 / 3.0) : t / (3 * d * d) + 4.0 / 29.0;
  }
  return {116 * f[1] - 16, 500 * (f[0] - f[1]), 200 * (f[1] - f[2])};
}

Rel ordered(double v1, double v2, bool smaller_wins) {
  if (v1 == v2 || std::abs(v1 - v2) < 0.02 * std::max(std::abs(v1), std::abs(v2))) return Ambiguous;
  return (smaller_wins ? v1 < v2 : v1 > v2) ? First : Second;
}

Rel relation(const IntrinsicStack& s, Modality m, int r1, int c1, int r2, int c2) {
  auto alb = [&](int r, int c, int k) { return double(s.albedo(r, c, k)); };
  switch (m) {
    case Modality::Depth: return ordered(s.depth(r1, c1), s.depth(r2, c2), true);
    case Modality::Normals: return ordered(s.normals(r1, c1, 2), s.normals(r2, c2, 2), false);
    case Modality::Irradiance: {
      auto ratio = [&](int r, int c) {
        const float e = s.irradiance(r, c);
        float rgb[3];
        for (int k = 0; k < 3; ++k) rgb[k] = std::min(1.0f, std::max(0.0f, s.albedo(r, c, k) * e));
        return lum(rgb[0], rgb[1], rgb[2]) / std::max(lum(alb(r, c, 0), alb(r, c, 1), alb(r, c, 2)), 1e-4);
      };
      return ordered(ratio(r1, c1), ratio(r2, c2), false);
    }
    case Modality::Albedo: {
      const auto a = lab(alb(r1, c1, 0), alb(r1, c1, 1), alb(r1, c1, 2));
      const auto b = lab(alb(r2, c2, 0), alb(r2, c2, 1), alb(r2, c2, 2));
      const double de = std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) +
                                  (a[2] - b[2]) * (a[2] - b[2]));
      return de > 10.0 ? Different : Same;
    }
  }
  return Ambiguous;
}

Rel from_library(const std::optional<Judgment>& j) {
  if (!j) return Ambiguous;
  switch (j->label) {
    case Label::FirstGreater: return First;
    case Label::SecondGreater: return Second;
    case Label::Same: return Same;
    case Label::Different: return Different;
  }
  return Ambiguous;
}

}  // namespace brute

/// Random 8x8 stack drawn from a few jittered levels so that ties, near-ties and threshold
/// crossings all occur.
IntrinsicStack random_stack(Rng& rng) {
  IntrinsicStack s(8, 8);
  std::array<std::array<double, 3>, 4> palette;
  std::array<double, 4> depth_levels, irr_levels;
  for (int i = 0; i < 4; ++i) {
    for (double& v : palette[i]) v = rng.uniform(0.02, 1.0);
    depth_levels[i] = rng.uniform(0.1, 1.0);
    irr_levels[i] = rng.uniform(0.0, 1.0);
  }
  auto jitter = [&](double v, double lo, double hi) {
    const int mode = rng.uniform_int(0, 2);
    if (mode == 0) return v;
    return std::clamp(v * (1.0 + rng.normal() * (mode == 1 ? 0.015 : 0.1)), lo, hi);
  };
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) {
      const auto& p = palette[rng.uniform_int(0, 3)];
      for (int k = 0; k < 3; ++k) s.albedo(r, c, k) = float(jitter(p[k], 0.0, 1.0));
      s.depth(r, c) = float(jitter(depth_levels[rng.uniform_int(0, 3)], 0.01, 1.0));
      s.irradiance(r, c) = float(jitter(irr_levels[rng.uniform_int(0, 3)], 0.0, 1.0));
      const double tilt = jitter(rng.uniform(0.0, 1.2), 0.0, 1.5), az = rng.uniform(0.0, 2 * std::numbers::pi);
      s.normals(r, c, 0) = float(std::sin(tilt) * std::cos(az));
      s.normals(r, c, 1) = float(std::sin(tilt) * std::sin(az));
      s.normals(r, c, 2) = float(std::cos(tilt));
    }
  return s;
}

void criterion_relation_oracle() {
  Clock clock;
  Rng rng(101);
  const JudgeConfig cfg;
  long agree = 0, total = 0;
  std::array<long, 5> seen{};
  for (int stack = 0; stack < 50; ++stack) {
    const IntrinsicStack s = random_stack(rng);
    for (Modality m : kModalities)
      for (int a = 0; a < 64; ++a)
        for (int b = 0; b < 64; ++b) {
          const PointPair pair{{a / 8, a % 8}, {b / 8, b % 8}, m};
          const brute::Rel lib = brute::from_library(derive_relation(s, pair, cfg));
          const brute::Rel ref = brute::relation(s, m, a / 8, a % 8, b / 8, b % 8);
          agree += lib == ref;
          ++seen[ref];
          ++total;
        }
  }
  const double t = clock.seconds();
  detail(fmt("label counts: ambiguous %ld, first %ld, second %ld, same %ld, different %ld", seen[0], seen[1], seen[2],
             seen[3], seen[4]));
  verdict(1, agree == total && t < 10.0,
          fmt("relation rules agree with brute force on %ld/%ld pairs (50 stacks, 4 modalities), %.2f s (limit 10 s)",
              agree, total, t));
}

// ---------------------------------------------------------------------------------------------
// 2. Reward / advantage / KL invariants

Architecture random_architecture(Rng& rng) {
  Architecture a;
  a.layers.clear();
  const int hidden = rng.uniform_int(1, 2);
  for (int l = 0; l < hidden; ++l) a.layers.push_back({rng.uniform_int(2, 6), rng.uniform_int(1, 2)});
  a.layers.push_back({kStateChannels, 1});
  a.time_frequencies = rng.uniform_int(0, 3);
  a.zero_init_last = false;
  return a;
}

Field random_field(Rng& rng, int h, int w, int c, double scale = 1.0) {
  Field f(h, w, c);
  for (double& v : f.data) v = scale * rng.normal();
  return f;
}

template <class T>
bool bit_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

void criterion_invariants() {
  Clock clock;
  Rng rng(202);
  const JudgeConfig rules;

  // Rewards of random predictions against random legal judgments.
  double rmin = 1.0, rmax = 0.0;
  int reward_cases = 0;
  for (int trial = 0; trial < 400; ++trial) {
    const IntrinsicStack pred = random_stack(rng);
    const Modality m = kModalities[rng.uniform_int(0, 3)];
    std::vector<JudgedPair> judged;
    const int n = rng.uniform_int(1, 40);
    for (int i = 0; i < n; ++i) {
      const PointPair p{{rng.uniform_int(0, 7), rng.uniform_int(0, 7)}, {rng.uniform_int(0, 7), rng.uniform_int(0, 7)}, m};
      const bool order = m != Modality::Albedo;
      const Label l = rng.bernoulli(0.5) ? (order ? Label::FirstGreater : Label::Same)
                                         : (order ? Label::SecondGreater : Label::Different);
      judged.push_back({p, {l, 1.0}});
    }
    for (bool strict : {true, false}) {
      try {
        const double r = alignment_reward(pred, judged, rules, strict);
        rmin = std::min(rmin, r);
        rmax = std::max(rmax, r);
        ++reward_cases;
      } catch (const RewardUnavailable&) {
      }
    }
  }
  const bool rewards_ok = rmin >= 0.0 && rmax <= 1.0;
  detail(fmt("rewards: %d cases, range [%.4f, %.4f]", reward_cases, rmin, rmax));

  // Advantages of random non-degenerate groups.
  double worst_mean = 0.0, worst_std = 0.0;
  for (int trial = 0; trial < 2000; ++trial) {
    const int g = rng.uniform_int(2, 16);
    std::vector<double> r(g);
    const double scale = std::pow(10.0, rng.uniform(-4, 1));
    for (double& v : r) v = rng.uniform(0, 1) * scale;
    if (trial % 3 == 0 && g > 2) r[0] = r[1];
    const auto a = group_advantages(r);
    double mean = 0, sq = 0;
    for (double v : a) mean += v;
    mean /= g;
    for (double v : a) sq += (v - mean) * (v - mean);
    worst_mean = std::max(worst_mean, std::abs(mean));
    worst_std = std::max(worst_std, std::abs(std::sqrt(sq / g) - 1.0));
  }
  const bool adv_ok = worst_mean <= 1e-6 && worst_std <= 1e-6;
  detail(fmt("advantages: 2000 groups, max |mean| %.2e, max |std - 1| %.2e", worst_mean, worst_std));

  // Step KL.
  double kl_min = 1e300, kl_same_max = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Architecture arch = random_architecture(rng);
    const VelocityNet a = VelocityNet::initialized(arch, 500 + trial);
    const VelocityNet b = VelocityNet::initialized(arch, 900 + trial);
    const VelocityNet a_copy = a;
    const SamplerConfig sc{.steps = rng.uniform_int(2, 15), .noise_level = rng.uniform(0.1, 1.5)};
    const Field x = random_field(rng, 6, 5, kStateChannels), c = random_field(rng, 6, 5, kCondChannels);
    const int k = rng.uniform_int(0, sc.steps - 1);
    kl_min = std::min(kl_min, step_kl(a, b, x, k, c, sc));
    kl_same_max = std::max(kl_same_max, step_kl(a, a_copy, x, k, c, sc));
  }
  const bool kl_ok = kl_min >= 0.0 && kl_same_max == 0.0;
  detail(fmt("step KL: 50 random pairs, min %.3e; identical nets max %.1e", kl_min, kl_same_max));

  // Zero-noise SDE against the ODE sampler.
  int identical = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const VelocityNet net = VelocityNet::initialized(random_architecture(rng), 1300 + trial);
    const Field cond = random_field(rng, 8, 7, kCondChannels, 0.5);
    SamplerConfig sc{.steps = rng.uniform_int(1, 20), .noise_level = 0.0};
    const IntrinsicStack sde = sample_sde(net, cond, sc, 40 + trial, trial).prediction;
    sc.noise_level = 0.7;
    const IntrinsicStack ode = sample_ode(net, cond, sc, 40 + trial, trial);
    identical += bit_equal(sde.albedo.data, ode.albedo.data) && bit_equal(sde.depth.data, ode.depth.data) &&
                 bit_equal(sde.normals.data, ode.normals.data) && bit_equal(sde.irradiance.data, ode.irradiance.data);
  }
  detail(fmt("SDE(a=0) vs ODE: %d/20 bit-identical", identical));
  verdict(2, rewards_ok && adv_ok && kl_ok && identical == 20,
          fmt("rewards in [0,1], advantages standardized within 1e-6, KL >= 0 and exactly 0 for identical nets, "
              "SDE(a=0) == ODE on %d/20 nets (%.2f s)",
              identical, clock.seconds()));
}

// ---------------------------------------------------------------------------------------------
// 3. Gradient fidelity

Architecture small_architecture(int width) {
  Architecture a;
  a.layers = {{width, 1}, {kStateChannels, 1}};
  a.time_frequencies = 1;
  a.zero_init_last = false;
  return a;
}

struct GradCheck {
  double worst = 0.0;
  std::size_t params = 0;
};

GradCheck check_gradient(VelocityNet net, const std::vector<double>& analytic,
                         const std::function<double(const VelocityNet&)>& loss) {
  GradCheck out;
  out.params = net.parameter_count();
  const double h = 1e-5;
  for (std::size_t p = 0; p < analytic.size(); ++p) {
    double& x = net.parameters()[p];
    const double keep = x;
    x = keep + h;
    const double up = loss(net);
    x = keep - h;
    const double down = loss(net);
    x = keep;
    const double fd = (up - down) / (2 * h);
    out.worst = std::max(out.worst, std::abs(analytic[p] - fd) / (std::abs(analytic[p]) + 1e-6));
  }
  return out;
}

void perturb(VelocityNet& net, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for (double& p : net.parameters()) p += scale * rng.normal();
}

void criterion_gradients() {
  Clock clock;
  double worst_fm = 0.0, worst_grpo = 0.0;
  std::size_t max_params = 0;
  SceneGenConfig sg;
  sg.resolution = 16;
  const auto scenes = generate_dataset(303, 3, sg);

  for (int width : {1, 2}) {
    const VelocityNet net = VelocityNet::initialized(small_architecture(width), 310 + width);
    max_params = std::max(max_params, net.parameter_count());
    Rng rng(320 + width);
    std::vector<const SceneSample*> picks{&scenes[width - 1], &scenes[width]};
    const FlowBatch batch = make_flow_batch(picks, rng);
    const LossAndGrad lg = flow_match_loss(net, batch);
    worst_fm = std::max(worst_fm, check_gradient(net, lg.grad, [&](const VelocityNet& n) {
                                    return flow_match_loss(n, batch, false).loss;
                                  }).worst);
  }

  for (int width : {1, 2}) {
    const VelocityNet gen = VelocityNet::initialized(small_architecture(width), 330 + width);
    VelocityNet ref = gen, cur = gen;
    perturb(ref, 340 + width, 0.05);
    perturb(cur, 350 + width, 0.002);
    max_params = std::max(max_params, cur.parameter_count());
    Rng rng(360 + width);
    GroupBatch g;
    g.cond = random_field(rng, 5, 4, kCondChannels);
    const SamplerConfig sc{.steps = 4, .noise_level = 0.7};
    g.trajectories = sample_group(gen, g.cond, sc, 4, 370 + width);
    g.advantages = group_advantages(std::vector<double>{0.2, 0.9, 0.5, 0.1});
    const ObjectiveResult r = grpo_objective(cur, ref, g, sc, 0.2, 0.3);
    worst_grpo = std::max(worst_grpo, check_gradient(cur, r.grad, [&](const VelocityNet& n) {
                                        return grpo_objective(n, ref, g, sc, 0.2, 0.3, false).loss;
                                      }).worst);
  }
  const double t = clock.seconds();
  verdict(3, worst_fm < 1e-3 && worst_grpo < 1e-3 && max_params <= 500 && t < 60.0,
          fmt("max relative error flow_match_loss %.2e, grpo_objective %.2e (limit 1e-3) on nets with <= %zu params, "
              "%.2f s (limit 60 s)",
              worst_fm, worst_grpo, max_params, t));
}

// ---------------------------------------------------------------------------------------------
// 4, 5, 7. GRPO fine-tuning runs

struct Run {
  EvalReport report;
  double final_kl = 0.0;
  double seconds = 0.0;
  int updates = 0;
};

constexpr int kPretrainScenes = 200;
constexpr int kHeldOut = 50;
constexpr int kGrpoScenes = 60;

struct Setup {
  std::vector<SceneSample> train, held, unlabeled;
  VelocityNet base;
  double pretrain_seconds = 0.0;
  double final_loss = 0.0;
};

Setup prepare() {
  Clock clock;
  SceneGenConfig sg;
  Setup s;
  s.train = generate_dataset(1001, kPretrainScenes, sg);
  s.held = generate_dataset(1002, kHeldOut, sg);
  s.unlabeled = generate_dataset(1003, kGrpoScenes, sg);
  PretrainConfig pc;
  pc.seed = 1004;
  pc.optim.total_steps = pc.steps;
  s.base = VelocityNet::initialized(Architecture{}, 1005);
  AdamW opt(pc.optim, s.base.parameter_count());
  const auto curve = pretrain(s.base, opt, s.train, pc);
  double tail = 0.0;
  for (std::size_t i = curve.size() - 200; i < curve.size(); ++i) tail += curve[i];
  s.final_loss = tail / 200;
  s.pretrain_seconds = clock.seconds();
  detail(fmt("pretrained %zu params on %d scenes for %lld steps: final loss %.4f, %.0f s", s.base.parameter_count(),
             kPretrainScenes, static_cast<long long>(pc.steps), s.final_loss, s.pretrain_seconds));
  return s;
}

Run fine_tune(const Setup& s, const std::string& name, bool noisy, double beta) {
  Clock clock;
  JudgeConfig jc;
  std::unique_ptr<PairJudge> judge;
  if (noisy)
    judge = std::make_unique<NoisyJudge>(jc, 1010);
  else
    judge = std::make_unique<OracleJudge>(jc);
  SceneJudgeService service(s.unlabeled, std::move(judge), jc, 1011);

  TrainConfig tc;
  tc.kl_beta = beta;
  tc.seed = 1012;
  VelocityNet net = s.base;
  std::ofstream log(kOut / (name + ".jsonl"));
  Run run;
  const auto result = train_grpo(net, policy_view(s.unlabeled), &service, tc, nullptr,
                                 [&](const GrpoLogRecord& r) { log << r.to_json().dump() << '\n'; });
  // Mean KL over the last epoch's updates.
  double kl = 0.0;
  int n = 0;
  for (std::size_t i = result.log.size() - s.unlabeled.size(); i < result.log.size(); ++i)
    if (!result.log[i].skipped) kl += result.log[i].kl, ++n;
  run.final_kl = n ? kl / n : 0.0;
  run.updates = static_cast<int>(result.log.size()) - result.skipped;

  JudgeConfig eval_rules;
  SceneJudgeService eval_judge(s.held, std::make_unique<OracleJudge>(eval_rules), eval_rules, 1020);
  run.report = alignment_report(s.base, net, s.held, eval_judge, EvalConfig{}, eval_rules);
  std::ofstream(kOut / (name + "_eval.json")) << run.report.to_json().dump(2) << '\n';
  Checkpoint ck;
  ck.architecture = net.architecture();
  ck.parameters = net.parameters();
  save_checkpoint(ck, (kOut / (name + ".ixck")).string());
  run.seconds = clock.seconds();

  detail(fmt("%s: %d updates, last-epoch KL %.4f, %.0f s", name.c_str(), run.updates, run.final_kl, run.seconds));
  for (Modality m : kModalities)
    detail(fmt("  %-10s reward %.4f -> %.4f (%+.4f)", to_string(m), run.report.reward_pre[int(m)],
               run.report.reward_post[int(m)], run.report.reward_delta(m)));
  detail(fmt("  WHDR(0.1) %.4f -> %.4f", run.report.pre.at("whdr"), run.report.post.at("whdr")));
  return run;
}

int modalities_improved(const EvalReport& r, double margin) {
  int n = 0;
  for (Modality m : kModalities) n += r.reward_delta(m) >= margin;
  return n;
}

// ---------------------------------------------------------------------------------------------
// 6. Poisson integration and the depth-normal reward

struct Surface {
  ImageF depth, normals;
};

Surface smooth_surface(Rng& rng, int res, double dpp) {
  const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1), fx = rng.uniform(0.05, 0.25),
               fy = rng.uniform(0.05, 0.25), px = rng.uniform(0, 6), py = rng.uniform(0, 6),
               gx = rng.uniform(-0.3, 0.3), gy = rng.uniform(-0.3, 0.3);
  Surface s{ImageF(res, res, 1), ImageF(res, res, 3)};
  for (int r = 0; r < res; ++r)
    for (int c = 0; c < res; ++c) {
      const double d = a * std::sin(fx * c + px) + b * std::cos(fy * r + py) + gx * c + gy * r;
      const double dx = a * fx * std::cos(fx * c + px) + gx, dy = -b * fy * std::sin(fy * r + py) + gy;
      s.depth(r, c) = float(0.5 + dpp * d);
      const double len = std::sqrt(dx * dx + dy * dy + 1);
      s.normals(r, c, 0) = float(dx / len);
      s.normals(r, c, 1) = float(dy / len);
      s.normals(r, c, 2) = float(1 / len);
    }
  return s;
}

double rmse_up_to_constant(const Field& est, const ImageF& truth) {
  const std::size_t n = truth.data.size();
  double me = 0, mt = 0;
  for (std::size_t i = 0; i < n; ++i) me += est.data[i], mt += truth.data[i];
  me /= n, mt /= n;
  double se = 0;
  for (std::size_t i = 0; i < n; ++i) se += std::pow((est.data[i] - me) - (truth.data[i] - mt), 2);
  return std::sqrt(se / n);
}

void criterion_poisson() {
  Clock clock;
  Rng rng(606);
  const double dpp = default_depth_per_pixel(32);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Surface s = smooth_surface(rng, 32, dpp);
    worst = std::max(worst, rmse_up_to_constant(poisson_integrate(s.normals, dpp).depth, s.depth));
  }
  // Consistent geometry against the same normals paired with another surface's depth.
  int ordered = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const Surface s = smooth_surface(rng, 32, dpp), other = smooth_surface(rng, 32, dpp);
    IntrinsicStack good(32, 32);
    good.normals = s.normals;
    good.depth = s.depth;
    IntrinsicStack bad = good;
    bad.depth = other.depth;
    ordered += dn_consistency_reward(good) > dn_consistency_reward(bad);
  }
  verdict(6, worst < 1e-3 && ordered == 20,
          fmt("Poisson recovery worst RMSE %.2e on 20 surfaces (limit 1e-3); consistent > inconsistent on %d/20 "
              "(%.2f s)",
              worst, ordered, clock.seconds()));
}

// ---------------------------------------------------------------------------------------------
// 8. CLI determinism

int run_cli(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" + std::string(RELFLOW_CLI) + "' " + args + " -q";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

unsigned long file_crc(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  const std::string bytes{std::istreambuf_iterator<char>(in), {}};
  return crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
}

void criterion_determinism() {
  Clock clock;
  const fs::path root = fs::absolute(kOut / "determinism");
  fs::remove_all(root);
  const std::string cfg = (root / "run.cfg").string();
  fs::create_directories(root);
  std::ofstream(cfg) << "seed = 8\n[scenegen]\nresolution = 16\n[pretrain]\nsteps = 40\nbatch_size = 4\n"
                        "[grpo]\ngroup_size = 4\npairs = 20\nepochs = 1\nlr = 1e-4\n[sampler]\nsteps = 6\n";
  const std::vector<std::string> files{"data.ixds", "pre.ixck", "loss.csv", "grpo.ixck", "grpo.jsonl"};
  std::vector<std::vector<unsigned long>> hashes;
  bool ok = true;
  for (const char* name : {"a", "b"}) {
    const fs::path dir = root / name;
    fs::create_directories(dir);
    ok &= run_cli(dir, "gen --count 6 --out data.ixds --config " + cfg) == 0;
    ok &= run_cli(dir, "pretrain --data data.ixds --out pre.ixck --loss-csv loss.csv --config " + cfg) == 0;
    ok &= run_cli(dir, "grpo --init pre.ixck --data data.ixds --out grpo.ixck --log grpo.jsonl --config " + cfg) == 0;
    std::vector<unsigned long> h;
    for (const auto& f : files) h.push_back(fs::exists(dir / f) ? file_crc(dir / f) : 0);
    hashes.push_back(h);
  }
  int same = 0;
  for (std::size_t i = 0; i < files.size(); ++i) {
    same += hashes[0][i] == hashes[1][i] && hashes[0][i] != 0;
    detail(fmt("%-11s crc32 %08lx / %08lx", files[i].c_str(), hashes[0][i], hashes[1][i]));
  }
  verdict(8, ok && same == static_cast<int>(files.size()),
          fmt("gen/pretrain/grpo re-runs give identical hashes for %d/%zu outputs (%.1f s)", same, files.size(),
              clock.seconds()));
}

}  // namespace

int main(int argc, char** argv) {
  // --quick skips the fine-tuning runs (criteria 4, 5, 7).
  const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
  fs::create_directories(kOut);
  Clock total;
  criterion_relation_oracle();
  criterion_invariants();
  criterion_gradients();
  criterion_poisson();
  criterion_determinism();
  if (quick) {
    for (const auto& [id, v] : verdicts) std::printf("%s criterion %d: %s\n", v.first ? "PASS" : "FAIL", id, v.second.c_str());
    return 0;
  }

  const Setup setup = prepare();
  const Run oracle = fine_tune(setup, "oracle_beta0.01", false, 0.01);
  {
    const int improved = modalities_improved(oracle.report, 0.03);
    const bool whdr_down = oracle.report.post.at("whdr") < oracle.report.pre.at("whdr");
    verdict(4, improved >= 3 && whdr_down,
            fmt("oracle judge: reward +0.03 on %d/4 modalities (need 3), WHDR %.4f -> %.4f (%s); pretrain %.0f s + "
                "fine-tune %.0f s",
                improved, oracle.report.pre.at("whdr"), oracle.report.post.at("whdr"),
                whdr_down ? "decreased" : "not decreased", setup.pretrain_seconds, oracle.seconds));
  }
  {
    const Run noisy = fine_tune(setup, "noisy_beta0.01", true, 0.01);
    const int improved = modalities_improved(noisy.report, 0.02);
    verdict(5, improved >= 2, fmt("noisy judge: reward +0.02 on %d/4 modalities (need 2)", improved));
  }
  {
    const Run free = fine_tune(setup, "oracle_beta0", false, 0.0);
    const double ratio = oracle.final_kl > 0.0 ? free.final_kl / oracle.final_kl : 0.0;
    verdict(7, ratio >= 5.0,
            fmt("last-epoch KL beta=0 %.4f vs beta=0.01 %.4f, ratio %.2f (need >= 5)", free.final_kl, oracle.final_kl,
                ratio));
  }

  int failures = 0;
  std::printf("\n");
  for (const auto& [id, v] : verdicts) {
    failures += !v.first;
    std::printf("%s criterion %d: %s\n", v.first ? "PASS" : "FAIL", id, v.second.c_str());
  }
  std::printf("%d of %zu criteria failed (%.0f s)\n", failures, verdicts.size(), total.seconds());
  return failures ? 1 : 0;
}
