// relflow command-line entry point: gen, pretrain, grpo, eval, report.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "relflow.hpp"

namespace fs = std::filesystem;
using namespace relflow;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kBadInput = 2, kJudgeFailure = 3 };

struct RunConfig {
  std::uint64_t seed = 1;
  int verbosity = 1;
  SceneGenConfig scenegen;
  int count = 200;
  Architecture architecture;
  PretrainConfig pretrain;
  TrainConfig grpo;
  JudgeConfig judge;
  EvalConfig eval;
};

const std::set<std::string> kKnownKeys{
    "seed", "verbosity",
    "scenegen.resolution", "scenegen.min_primitives", "scenegen.max_primitives", "scenegen.ground_plane",
    "scenegen.ambient_min", "scenegen.ambient_max", "scenegen.count",
    "model.width", "model.layers", "model.dilations", "model.time_frequencies", "model.activation",
    "pretrain.steps", "pretrain.batch_size", "pretrain.lr", "pretrain.weight_decay", "pretrain.clip_norm",
    "grpo.group_size", "grpo.pairs", "grpo.epochs", "grpo.clip_range", "grpo.beta", "grpo.lr",
    "grpo.weight_decay", "grpo.clip_norm", "grpo.reward", "grpo.interleave", "grpo.interleave_batch",
    "grpo.ambiguous_is_disagreement", "grpo.dn_depth_per_pixel",
    "sampler.steps", "sampler.noise_level", "sampler.schedule", "sampler.sigma_max",
    "judge.kind", "judge.accuracy_depth", "judge.accuracy_normals", "judge.accuracy_albedo",
    "judge.accuracy_irradiance", "judge.command", "judge.attach_image", "judge.timeout_s", "judge.albedo_delta_e",
    "judge.exclusion_ratio", "judge.division_floor", "judge.retry_budget_per_pair",
    "eval.sampler_steps", "eval.pairs", "eval.whdr_pairs", "eval.whdr_delta", "eval.normal_threshold_deg"};

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::erase(item, ' ');
    out.push_back(ConfigFile::convert<int>(key, item));
  }
  return out;
}

void apply_config(const ConfigFile& f, RunConfig& rc) {
  f.require_known(kKnownKeys);
  f.read("seed", rc.seed);
  f.read("verbosity", rc.verbosity);
  f.read("scenegen.resolution", rc.scenegen.resolution);
  f.read("scenegen.min_primitives", rc.scenegen.min_primitives);
  f.read("scenegen.max_primitives", rc.scenegen.max_primitives);
  f.read("scenegen.ground_plane", rc.scenegen.ground_plane);
  f.read("scenegen.ambient_min", rc.scenegen.ambient_min);
  f.read("scenegen.ambient_max", rc.scenegen.ambient_max);
  f.read("scenegen.count", rc.count);

  if (f.has("model.layers") || f.has("model.width") || f.has("model.dilations")) {
    int width = 32;
    f.read("model.width", width);
    std::vector<int> dil{1, 2};
    if (f.has("model.dilations")) dil = parse_int_list("model.dilations", f.values().at("model.dilations"));
    int hidden = static_cast<int>(dil.size());
    f.read("model.layers", hidden);
    if (hidden < 0) throw ConfigError("model.layers must be >= 0");
    rc.architecture.layers.clear();
    for (int l = 0; l < hidden; ++l) rc.architecture.layers.push_back({width, dil.empty() ? 1 : dil[l % dil.size()]});
    rc.architecture.layers.push_back({kStateChannels, 1});
  }
  f.read("model.time_frequencies", rc.architecture.time_frequencies);
  if (f.has("model.activation")) rc.architecture.activation = parse_activation(f.values().at("model.activation"));

  f.read("pretrain.steps", rc.pretrain.steps);
  f.read("pretrain.batch_size", rc.pretrain.batch_size);
  f.read("pretrain.lr", rc.pretrain.optim.lr);
  f.read("pretrain.weight_decay", rc.pretrain.optim.weight_decay);
  f.read("pretrain.clip_norm", rc.pretrain.optim.clip_norm);

  f.read("grpo.group_size", rc.grpo.group_size);
  f.read("grpo.pairs", rc.grpo.pairs);
  f.read("grpo.epochs", rc.grpo.epochs);
  f.read("grpo.clip_range", rc.grpo.clip_range);
  f.read("grpo.beta", rc.grpo.kl_beta);
  f.read("grpo.lr", rc.grpo.optim.lr);
  f.read("grpo.weight_decay", rc.grpo.optim.weight_decay);
  f.read("grpo.clip_norm", rc.grpo.optim.clip_norm);
  if (f.has("grpo.reward")) rc.grpo.reward = parse_reward_kind(f.values().at("grpo.reward"));
  f.read("grpo.interleave", rc.grpo.interleave_flow_matching);
  f.read("grpo.interleave_batch", rc.grpo.interleave_batch);
  f.read("grpo.ambiguous_is_disagreement", rc.grpo.ambiguous_is_disagreement);
  f.read("grpo.dn_depth_per_pixel", rc.grpo.dn_depth_per_pixel);

  f.read("sampler.steps", rc.grpo.sampler.steps);
  f.read("sampler.noise_level", rc.grpo.sampler.noise_level);
  if (f.has("sampler.schedule")) rc.grpo.sampler.schedule = parse_sigma_schedule(f.values().at("sampler.schedule"));
  f.read("sampler.sigma_max", rc.grpo.sampler.sigma_max);

  if (f.has("judge.kind")) rc.judge.kind = parse_judge_kind(f.values().at("judge.kind"));
  static const std::array<std::pair<const char*, Modality>, 4> acc{{{"judge.accuracy_depth", Modality::Depth},
                                                                    {"judge.accuracy_normals", Modality::Normals},
                                                                    {"judge.accuracy_albedo", Modality::Albedo},
                                                                    {"judge.accuracy_irradiance", Modality::Irradiance}}};
  for (const auto& [key, m] : acc)
    if (f.has(key)) {
      double a = 0;
      f.read(key, a);
      rc.judge.flip_probability[int(m)] = 1.0 - a;
    }
  f.read("judge.command", rc.judge.external_command);
  f.read("judge.attach_image", rc.judge.external_attach_image);
  f.read("judge.timeout_s", rc.judge.external_timeout_s);
  f.read("judge.albedo_delta_e", rc.judge.albedo_delta_e);
  f.read("judge.exclusion_ratio", rc.judge.exclusion_ratio);
  f.read("judge.division_floor", rc.judge.division_floor);
  f.read("judge.retry_budget_per_pair", rc.judge.retry_budget_per_pair);

  f.read("eval.sampler_steps", rc.eval.sampler_steps);
  f.read("eval.pairs", rc.eval.pairs);
  f.read("eval.whdr_pairs", rc.eval.whdr_pairs);
  f.read("eval.whdr_delta", rc.eval.whdr_delta);
  f.read("eval.normal_threshold_deg", rc.eval.normal_threshold_deg);
}

/// Config file first, then `--set section.key=value` overrides, then dedicated flags.
struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool quiet = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "Configuration file");
    app->add_option("--set", overrides, "Override a config key, e.g. --set grpo.beta=0");
    app->add_option("--seed", seed, "Root seed");
    app->add_flag("-q,--quiet", quiet, "Suppress progress output");
  }

  RunConfig resolve() const {
    ConfigFile f;
    if (!config_path.empty()) f = ConfigFile::load(config_path);
    for (const std::string& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + o + "'");
      f.set(o.substr(0, eq), o.substr(eq + 1));
    }
    RunConfig rc;
    apply_config(f, rc);
    if (seed) rc.seed = *seed;
    if (quiet) rc.verbosity = 0;
    return rc;
  }
};

std::vector<SceneSample> load_scenes(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("dataset not found: " + path);
  return read_dataset(path);
}

void ensure_parent(const std::string& path) {
  const fs::path p = fs::path(path).parent_path();
  if (!p.empty()) fs::create_directories(p);
}

std::unique_ptr<SceneJudgeService> make_judge_service(const std::vector<SceneSample>& scenes, const RunConfig& rc,
                                                      std::string_view label) {
  rc.judge.validate();
  return std::make_unique<SceneJudgeService>(scenes, make_pair_judge(rc.judge, derive_seed(derive_seed(rc.seed, label), "judge")),
                                             rc.judge, derive_seed(rc.seed, label));
}

// --- gen -------------------------------------------------------------------------------------

int cmd_gen(const RunConfig& rc, std::optional<int> count, const std::string& out) {
  const int n = count.value_or(rc.count);
  if (n < 1) throw ConfigError("gen: count must be >= 1");
  rc.scenegen.validate();
  const auto scenes = generate_dataset(rc.seed, n, rc.scenegen);
  ensure_parent(out);
  write_dataset(scenes, out);
  if (rc.verbosity) std::cerr << "wrote " << n << " scenes to " << out << "\n";
  return kOk;
}

// --- pretrain --------------------------------------------------------------------------------

int cmd_pretrain(RunConfig rc, const std::string& data_path, const std::string& out, const std::string& resume,
                 const std::string& loss_csv, std::optional<std::int64_t> stop_after) {
  const auto data = load_scenes(data_path);
  PretrainConfig pc = rc.pretrain;
  pc.seed = derive_seed(rc.seed, "pretrain");
  pc.optim.total_steps = pc.steps;
  pc.validate();
  if (stop_after) {
    if (*stop_after < 1) throw ConfigError("--stop-after must be >= 1");
    pc.steps = std::min(pc.steps, *stop_after);
  }

  VelocityNet net = VelocityNet::initialized(rc.architecture, derive_seed(rc.seed, "init"));
  AdamW opt(pc.optim, net.parameter_count());
  if (!resume.empty()) {
    const Checkpoint ck = load_checkpoint(resume);
    if (ck.seed != rc.seed) throw ConfigError("resume: checkpoint was trained with a different seed");
    net = ck.net();
    if (ck.optimizer.m.size() != net.parameter_count()) throw ConfigError("resume: checkpoint has no optimizer state");
    opt.set_state(ck.optimizer);
  }

  std::ofstream csv;
  if (!loss_csv.empty()) {
    ensure_parent(loss_csv);
    const bool append = !resume.empty() && fs::exists(loss_csv);
    csv.open(loss_csv, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw ConfigError("cannot write " + loss_csv);
    if (!append) csv << "step,loss\n";
    csv << std::setprecision(9);
  }
  auto save = [&] {
    Checkpoint ck;
    ck.architecture = net.architecture();
    ck.parameters = net.parameters();
    ck.optimizer = opt.state();
    ck.seed = rc.seed;
    ck.step = static_cast<std::uint64_t>(opt.state().step);
    ck.meta = {{"stage", "pretrain"}, {"dataset", fs::path(data_path).filename().string()}};
    ensure_parent(out);
    save_checkpoint(ck, out);
  };
  try {
    pretrain(net, opt, data, pc, [&](std::int64_t step, double loss) {
      if (csv.is_open()) csv << step << ',' << loss << '\n';
      if (rc.verbosity && (step % 100 == 0 || step + 1 == pc.steps))
        std::cerr << "step " << step << " loss " << loss << "\n";
    });
  } catch (const NumericError&) {
    save();
    throw;
  }
  save();
  return kOk;
}

// --- grpo ------------------------------------------------------------------------------------

int cmd_grpo(RunConfig rc, const std::string& init, const std::string& data_path, const std::string& out,
             const std::string& log_path, const std::string& interleave_path) {
  const Checkpoint start = load_checkpoint(init);
  VelocityNet net = start.net();
  const auto scenes = load_scenes(data_path);
  rc.grpo.seed = derive_seed(rc.seed, "grpo");
  rc.grpo.validate();

  std::vector<SceneSample> synthetic;
  if (rc.grpo.interleave_flow_matching) {
    if (interleave_path.empty()) throw ConfigError("--interleave needs --interleave-data");
    synthetic = load_scenes(interleave_path);
  }
  // Only the judge service holds the scenes; the loop itself gets RGB.
  std::unique_ptr<SceneJudgeService> judge;
  if (rc.grpo.reward == RewardKind::JudgeAlignment) judge = make_judge_service(scenes, rc, "grpo");
  const std::vector<PolicyImage> images = policy_view(scenes);

  std::ofstream log;
  if (!log_path.empty()) {
    ensure_parent(log_path);
    log.open(log_path, std::ios::trunc);
    if (!log) throw ConfigError("cannot write " + log_path);
  }
  auto save = [&](const char* stage) {
    Checkpoint ck;
    ck.architecture = net.architecture();
    ck.parameters = net.parameters();
    ck.seed = rc.seed;
    ck.step = start.step;
    ck.meta = {{"stage", stage}, {"init", fs::path(init).filename().string()}, {"beta", rc.grpo.kl_beta},
               {"reward", rc.grpo.reward == RewardKind::JudgeAlignment ? "alignment" : "dn"}};
    ensure_parent(out);
    save_checkpoint(ck, out);
  };
  try {
    const GrpoResult res = train_grpo(net, images, judge.get(), rc.grpo, rc.grpo.interleave_flow_matching ? &synthetic : nullptr,
                                      [&](const GrpoLogRecord& r) {
                                        if (log.is_open()) log << r.to_json().dump() << '\n' << std::flush;
                                        if (rc.verbosity && r.step % 10 == 0)
                                          std::cerr << "iter " << r.step << " reward " << r.mean_reward << " kl "
                                                    << r.kl << (r.skipped ? " (skipped)" : "") << "\n";
                                      });
    if (rc.verbosity) std::cerr << "skipped " << res.skipped << " of " << res.log.size() << " groups\n";
  } catch (const NumericError&) {
    save("grpo-aborted");
    throw;
  }
  save("grpo");
  return kOk;
}

// --- eval ------------------------------------------------------------------------------------

int cmd_eval(RunConfig rc, const std::string& pre_path, const std::string& post_path, const std::string& data_path,
             const std::string& out_json, const std::string& out_csv) {
  const VelocityNet pre = load_checkpoint(pre_path).net();
  const VelocityNet post = post_path.empty() ? pre : load_checkpoint(post_path).net();
  const auto scenes = load_scenes(data_path);
  rc.eval.seed = derive_seed(rc.seed, "eval");
  auto judge = make_judge_service(scenes, rc, "eval");
  EvalReport report = alignment_report(pre, post, scenes, *judge, rc.eval, rc.judge);
  report.config["pre"] = fs::path(pre_path).filename().string();
  report.config["post"] = fs::path(post_path.empty() ? pre_path : post_path).filename().string();
  report.config["judge"] = rc.judge.kind == JudgeKind::Oracle ? "oracle" : rc.judge.kind == JudgeKind::Noisy ? "noisy" : "external";
  const std::string json = report.to_json().dump(2) + "\n";
  if (out_json.empty()) {
    std::cout << json;
  } else {
    ensure_parent(out_json);
    std::ofstream(out_json) << json;
  }
  if (!out_csv.empty()) {
    ensure_parent(out_csv);
    std::ofstream(out_csv) << report.to_csv();
  }
  return kOk;
}

// --- report ----------------------------------------------------------------------------------

nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what(), 0);
  }
}

int cmd_report(const std::vector<std::string>& reports, const std::vector<std::string>& logs) {
  if (reports.empty() && logs.empty()) throw ConfigError("report: give at least one --eval or --log file");
  std::cout << std::fixed << std::setprecision(4);
  for (const std::string& path : reports) {
    const EvalReport r = EvalReport::from_json(read_json(path));
    std::cout << "## " << path << " (" << r.sample_count << " images)\n\n";
    std::cout << "| modality | reward pre | reward post | delta |\n|---|---|---|---|\n";
    for (Modality m : kModalities)
      std::cout << "| " << to_string(m) << " | " << r.reward_pre[int(m)] << " | " << r.reward_post[int(m)] << " | "
                << std::showpos << r.reward_delta(m) << std::noshowpos << " |\n";
    std::cout << "\n| metric | pre | post |\n|---|---|---|\n";
    for (const auto& name : metric_names())
      if (r.pre.count(name)) std::cout << "| " << name << " | " << r.pre.at(name) << " | " << r.post.at(name) << " |\n";
    std::cout << "\n";
  }
  for (const std::string& path : logs) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open " + path);
    std::string line;
    std::vector<double> rewards, kls;
    int skipped = 0, lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what(), 0);
      }
      if (j.value("skipped", false)) {
        ++skipped;
        continue;
      }
      rewards.push_back(j.at("mean_reward").get<double>());
      kls.push_back(j.at("kl").get<double>());
    }
    std::cout << "## " << path << "\n\n" << rewards.size() << " updates, " << skipped << " skipped\n";
    if (!rewards.empty()) {
      const std::size_t chunk = std::max<std::size_t>(1, rewards.size() / 5);
      std::cout << "\n| updates | mean reward | mean kl |\n|---|---|---|\n";
      for (std::size_t b = 0; b < rewards.size(); b += chunk) {
        const std::size_t e = std::min(rewards.size(), b + chunk);
        double rs = 0, ks = 0;
        for (std::size_t i = b; i < e; ++i) rs += rewards[i], ks += kls[i];
        std::cout << "| " << b << "-" << e - 1 << " | " << rs / (e - b) << " | " << ks / (e - b) << " |\n";
      }
    }
    std::cout << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Judge-guided GRPO fine-tuning of a rectified-flow intrinsic decomposition net"};
  app.require_subcommand(1);

  CommonOptions gen_opts, pre_opts, grpo_opts, eval_opts;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic scene dataset");
  gen_opts.attach(gen);
  std::optional<int> gen_count;
  std::string gen_out;
  gen->add_option("--count", gen_count, "Number of scenes");
  gen->add_option("--out", gen_out, "Output .ixds file")->required();

  auto* pre = app.add_subcommand("pretrain", "Flow-matching pretraining");
  pre_opts.attach(pre);
  std::string pre_data, pre_out, pre_resume, pre_csv;
  std::optional<std::int64_t> pre_steps;
  pre->add_option("--data", pre_data, "Training dataset (.ixds)")->required();
  pre->add_option("--out", pre_out, "Output checkpoint (.ixck)")->required();
  pre->add_option("--resume", pre_resume, "Continue from this checkpoint");
  pre->add_option("--loss-csv", pre_csv, "Write the loss curve here");
  pre->add_option("--steps", pre_steps, "Total optimizer steps");
  std::optional<std::int64_t> pre_stop;
  pre->add_option("--stop-after", pre_stop, "Save and exit after this many steps; the schedule still spans --steps");

  auto* grpo = app.add_subcommand("grpo", "Judge-guided GRPO fine-tuning");
  grpo_opts.attach(grpo);
  std::string grpo_init, grpo_data, grpo_out, grpo_log, grpo_inter, grpo_reward, grpo_judge, grpo_cmd;
  std::optional<double> grpo_beta, grpo_lr;
  std::optional<int> grpo_epochs;
  bool grpo_interleave = false;
  grpo->add_option("--init", grpo_init, "Pretrained checkpoint")->required();
  grpo->add_option("--data", grpo_data, "Scenes to fine-tune on (.ixds)")->required();
  grpo->add_option("--out", grpo_out, "Output checkpoint")->required();
  grpo->add_option("--log", grpo_log, "Metrics log (JSONL)");
  grpo->add_option("--reward", grpo_reward, "alignment or dn");
  grpo->add_option("--judge", grpo_judge, "oracle, noisy or external");
  grpo->add_option("--judge-command", grpo_cmd, "Command line of the external judge");
  grpo->add_option("--beta", grpo_beta, "KL weight");
  grpo->add_option("--lr", grpo_lr, "Learning rate");
  grpo->add_option("--epochs", grpo_epochs, "Passes over the scenes");
  grpo->add_flag("--interleave", grpo_interleave, "Alternate with flow-matching batches");
  grpo->add_option("--interleave-data", grpo_inter, "Synthetic dataset for interleaved batches");

  auto* ev = app.add_subcommand("eval", "Pre/post evaluation on held-out scenes");
  eval_opts.attach(ev);
  std::string ev_pre, ev_post, ev_data, ev_json, ev_csv, ev_judge;
  ev->add_option("--pre", ev_pre, "Baseline checkpoint")->required();
  ev->add_option("--post", ev_post, "Fine-tuned checkpoint (defaults to --pre)");
  ev->add_option("--data", ev_data, "Held-out dataset (.ixds)")->required();
  ev->add_option("--out", ev_json, "Report JSON (stdout if omitted)");
  ev->add_option("--csv", ev_csv, "Per-image CSV");
  ev->add_option("--judge", ev_judge, "oracle, noisy or external");

  auto* rep = app.add_subcommand("report", "Summarize eval reports and GRPO logs");
  std::vector<std::string> rep_eval, rep_log;
  rep->add_option("--eval", rep_eval, "EvalReport JSON files");
  rep->add_option("--log", rep_log, "GRPO metrics logs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadInput;
  }

  try {
    if (*gen) return cmd_gen(gen_opts.resolve(), gen_count, gen_out);
    if (*pre) {
      RunConfig rc = pre_opts.resolve();
      if (pre_steps) rc.pretrain.steps = *pre_steps;
      return cmd_pretrain(rc, pre_data, pre_out, pre_resume, pre_csv, pre_stop);
    }
    if (*grpo) {
      RunConfig rc = grpo_opts.resolve();
      if (!grpo_reward.empty()) rc.grpo.reward = parse_reward_kind(grpo_reward);
      if (!grpo_judge.empty()) rc.judge.kind = parse_judge_kind(grpo_judge);
      if (!grpo_cmd.empty()) rc.judge.external_command = grpo_cmd;
      if (grpo_beta) rc.grpo.kl_beta = *grpo_beta;
      if (grpo_lr) rc.grpo.optim.lr = *grpo_lr;
      if (grpo_epochs) rc.grpo.epochs = *grpo_epochs;
      if (grpo_interleave) rc.grpo.interleave_flow_matching = true;
      return cmd_grpo(rc, grpo_init, grpo_data, grpo_out, grpo_log, grpo_inter);
    }
    if (*ev) {
      RunConfig rc = eval_opts.resolve();
      if (!ev_judge.empty()) rc.judge.kind = parse_judge_kind(ev_judge);
      return cmd_eval(rc, ev_pre, ev_post, ev_data, ev_json, ev_csv);
    }
    if (*rep) return cmd_report(rep_eval, rep_log);
  } catch (const JudgeUnavailable& e) {
    std::cerr << "judge failure: " << e.what() << "\n";
    return kJudgeFailure;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kBadInput;
  } catch (const FormatError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
