// dmil_cli: dataset generation, training, evaluation and self-checks.
//
// Exit codes: 0 success, 2 usage or input error (nothing written), 3 runtime
// failure (including training divergence and failed checks).

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dmil/check.hpp"
#include "dmil/protocols.hpp"
#include "dmil/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dmil;

namespace {

constexpr const char* kVersion = "dmil 1.0.0";
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json_file(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw UsageError("'" + path + "' is not valid JSON: " + e.what());
  }
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_hash(const std::string& path) { return "fnv1a64:" + hex64(fnv1a(read_file(path))); }

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// Writes next to the target and renames, so readers never see partial files.
void write_file_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out << content;
    if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

// Runs a preparation step, reporting contract and format errors as usage errors.
template <class F>
auto prepare(F&& f) {
  try {
    return f();
  } catch (const ContractViolation& e) {
    throw UsageError(e.what());
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenFlags {
  std::string out;
  std::string out_suboptimal;
  std::string config;
  std::optional<std::string> env;
  std::optional<std::size_t> n;
  std::optional<std::uint64_t> seed;
  std::optional<int> episode_steps;
  std::optional<double> noise;
  std::optional<double> corrupt_fraction;
  std::optional<double> corrupt_scale;
  std::optional<double> mix_x;
  std::optional<std::size_t> mediocre_n;
  std::optional<double> degradation;
  std::optional<double> mediocre_noise;
};

DataProtocol protocol_from_json(const json& j) {
  static const std::vector<std::string> known{"env",          "n",           "seed",          "episode_steps",
                                              "noise_fraction", "noise_std",  "corrupt_fraction", "corrupt_scale",
                                              "mix_x",        "mediocre_n",  "degradation",   "mediocre_noise_std"};
  if (!j.is_object()) throw UsageError("gen-data config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw UsageError("unknown gen-data config key '" + key + "'");
  }
  DataProtocol p;
  try {
    p.env = j.value("env", p.env);
    p.n = j.value("n", p.n);
    p.seed = j.value("seed", p.seed);
    p.episode_steps = j.value("episode_steps", p.episode_steps);
    p.noise_fraction = j.value("noise_fraction", p.noise_fraction);
    if (j.contains("noise_std")) p.noise_std = j["noise_std"].get<double>();
    p.corrupt_fraction = j.value("corrupt_fraction", p.corrupt_fraction);
    p.corrupt_scale = j.value("corrupt_scale", p.corrupt_scale);
    if (j.contains("mix_x")) p.mix_x = j["mix_x"].get<double>();
    p.mediocre_n = j.value("mediocre_n", p.mediocre_n);
    p.degradation = j.value("degradation", p.degradation);
    p.mediocre_noise_std = j.value("mediocre_noise_std", p.mediocre_noise_std);
  } catch (const json::exception& e) {
    throw UsageError(std::string("gen-data config: ") + e.what());
  }
  return p;
}

fs::path suboptimal_path(const GenFlags& f) {
  if (!f.out_suboptimal.empty()) return f.out_suboptimal;
  fs::path p(f.out);
  return p.parent_path() / (p.stem().string() + ".suboptimal" + p.extension().string());
}

int cmd_gen_data(const GenFlags& f) {
  DataProtocol p = f.config.empty() ? DataProtocol{} : protocol_from_json(read_json_file(f.config));
  if (f.env) p.env = *f.env;
  if (f.n) p.n = *f.n;
  if (f.seed) p.seed = *f.seed;
  if (f.episode_steps) p.episode_steps = *f.episode_steps;
  if (f.noise) p.noise_std = *f.noise;
  if (f.corrupt_fraction) p.corrupt_fraction = *f.corrupt_fraction;
  if (f.corrupt_scale) p.corrupt_scale = *f.corrupt_scale;
  if (f.mix_x) p.mix_x = *f.mix_x;
  if (f.mediocre_n) p.mediocre_n = *f.mediocre_n;
  if (f.degradation) p.degradation = *f.degradation;
  if (f.mediocre_noise) p.mediocre_noise_std = *f.mediocre_noise;
  prepare([&] {
    p.validate();
    make_env(p.env);
    return 0;
  });
  if (p.mix_x && suboptimal_path(f) == fs::path(f.out)) throw UsageError("--out and --out-suboptimal must differ");

  const GeneratedData data = generate_data(p);
  write_file_atomic(f.out, dataset_to_csv(data.expert));
  json summary{{"expert", {{"path", f.out}, {"transitions", data.expert.size()}}}};
  if (data.suboptimal) {
    const fs::path sub = suboptimal_path(f);
    write_file_atomic(sub, dataset_to_csv(*data.suboptimal));
    summary["suboptimal"] = {{"path", sub.string()}, {"transitions", data.suboptimal->size()}};
  }
  std::cout << summary.dump() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainFlags {
  std::string out;
  std::string config;
  std::string data;
  std::string data_suboptimal;
  std::optional<std::string> algo;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::optional<std::string> env;
  std::optional<int> eval_episodes;
  std::optional<int> log_every;
};

int cmd_train(const TrainFlags& f) {
  TrainConfig config = f.config.empty() ? TrainConfig{} : prepare([&] { return config_from_json(read_json_file(f.config)); });
  prepare([&] {
    if (f.algo) config.algo = parse_algo(*f.algo);
    if (f.seed) config.seed = *f.seed;
    if (f.steps) config.total_steps = *f.steps;
    if (f.env) config.env = *f.env;
    if (f.eval_episodes) config.eval_episodes = *f.eval_episodes;
    if (f.log_every) config.log_every = *f.log_every;
    config.validate();
    return 0;
  });
  if (config.algo == Algo::d2mil && f.data_suboptimal.empty()) throw UsageError("--algo d2mil requires --data-suboptimal");
  if (config.algo != Algo::d2mil && !f.data_suboptimal.empty()) {
    throw UsageError("--data-suboptimal is only used by --algo d2mil");
  }
  const LinearEnv env = prepare([&] { return make_env(config.env); });
  const Dataset expert = prepare([&] { return load_dataset_csv(f.data); });
  std::optional<Dataset> suboptimal;
  if (!f.data_suboptimal.empty()) suboptimal = prepare([&] { return load_dataset_csv(f.data_suboptimal); });
  for (const Dataset* d : std::initializer_list<const Dataset*>{&expert, suboptimal ? &*suboptimal : nullptr}) {
    if (d && (d->state_dim != env.state_dim() || d->action_dim != env.action_dim())) {
      throw UsageError("dataset dimensions do not match environment " + config.env);
    }
  }
  if (expert.empty()) throw UsageError("expert dataset is empty");

  const fs::path out(f.out);
  json manifest{{"version", kVersion},
                {"seed", config.seed},
                {"config", to_json(config)},
                {"datasets", {{"expert", {{"path", f.data}, {"hash", file_hash(f.data)}}}}},
                {"started_at", utc_now()}};
  if (suboptimal) manifest["datasets"]["suboptimal"] = {{"path", f.data_suboptimal}, {"hash", file_hash(f.data_suboptimal)}};
  write_file_atomic(out / "manifest.json", manifest.dump(2) + "\n");

  const TrainResult result = train(config, expert, suboptimal ? &*suboptimal : nullptr, &env);

  std::ostringstream log;
  write_jsonl(log, result.log);
  write_file_atomic(out / "log.jsonl", log.str());
  std::ostringstream ck;
  make_checkpoint(result.models).write(ck);
  write_file_atomic(out / "model.ckpt", ck.str());
  manifest["finished_at"] = utc_now();
  write_file_atomic(out / "manifest.json", manifest.dump(2) + "\n");

  json summary{{"out", out.string()}, {"steps", config.total_steps}};
  if (!result.log.evals.empty()) {
    summary["final_eval"] = {{"mean", result.log.final_eval().result.mean}, {"std", result.log.final_eval().result.std}};
  }
  std::cout << summary.dump() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalFlags {
  std::string out;
  std::string config;
  std::string checkpoint;
  std::string controller;
  std::string env = "stand-still";
  int episodes = 10;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalFlags& f) {
  if (f.checkpoint.empty() == f.controller.empty()) throw UsageError("give exactly one of --checkpoint or --controller");
  if (f.episodes <= 0) throw UsageError("--episodes must be positive");
  const LinearEnv env = prepare([&] { return make_env(f.env); });
  EvalResult r;
  if (!f.checkpoint.empty()) {
    const ModelSet models = prepare([&] { return model_set_from_checkpoint(Checkpoint::load(f.checkpoint)); });
    r = evaluate(models.policy, env, f.episodes, f.seed);
  } else if (f.controller == "lqr") {
    const LqrController lqr = make_lqr_expert(env);
    r = evaluate([&](const Vector& s) { return lqr.act(s); }, env, f.episodes, f.seed);
  } else if (f.controller == "zero") {
    r = evaluate([&](const Vector&) { return Vector(Vector::Zero(env.action_dim())); }, env, f.episodes, f.seed);
  } else {
    throw UsageError("--controller must be lqr or zero");
  }
  const json out{{"env", env.name}, {"episodes", f.episodes}, {"mean", r.mean}, {"std", r.std}, {"scores", r.scores}};
  std::cout << out.dump() << '\n';
  if (!f.out.empty()) {
    std::string csv = "episode,score\n";
    for (std::size_t i = 0; i < r.scores.size(); ++i) csv += std::to_string(i) + "," + format_double(r.scores[i]) + "\n";
    write_file_atomic(f.out, csv);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

struct CheckFlags {
  std::string out;
  std::string config;
  std::uint64_t seed = 1;
  std::string inject_fault;
};

int cmd_check(const CheckFlags& f) {
  CheckOptions opt;
  opt.seed = f.seed;
  if (!f.inject_fault.empty()) {
    if (f.inject_fault != "dmil-weight-sign") throw UsageError("unknown --inject-fault (expected dmil-weight-sign)");
    opt.inject_weight_sign_error = true;
  }
  const auto results = run_property_checks(opt);
  json report = json::array();
  std::vector<std::string> failed;
  for (const auto& r : results) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
    report.push_back({{"name", r.name}, {"passed", r.passed}, {"metric", r.metric}, {"threshold", r.threshold},
                      {"detail", r.detail}});
    if (!r.passed) failed.push_back(r.name);
  }
  if (!f.out.empty()) write_file_atomic(f.out, report.dump(2) + "\n");
  if (!failed.empty()) {
    std::cerr << "failed properties:";
    for (const auto& n : failed) std::cerr << ' ' << n;
    std::cerr << '\n';
    return kExitRuntime;
  }
  std::cout << results.size() << " properties passed\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discriminator-guided model-based offline imitation learning"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1, 1);

  GenFlags gen;
  auto* g = app.add_subcommand("gen-data", "Generate a CSV dataset from the LQR expert");
  g->add_option("--out", gen.out, "Output CSV path")->required();
  g->add_option("--out-suboptimal", gen.out_suboptimal, "Suboptimal CSV path for --mix-x (default <out>.suboptimal.csv)");
  g->add_option("--config", gen.config, "JSON file with generation settings");
  g->add_option("--env", gen.env, "stand-still or move-straight");
  g->add_option("--n", gen.n, "Number of expert transitions");
  g->add_option("--seed", gen.seed, "Master seed");
  g->add_option("--episode-steps", gen.episode_steps, "Trajectory length cap (0 = episode limit)");
  g->add_option("--noise", gen.noise, "Absolute exploration noise std (default 5% of expert action std)");
  g->add_option("--corrupt-fraction", gen.corrupt_fraction, "Fraction of rows whose state gets Gaussian noise");
  g->add_option("--corrupt-scale", gen.corrupt_scale, "Noise std in units of the per-dimension state std");
  g->add_option("--mix-x", gen.mix_x, "Fraction of expert trajectories moved into the suboptimal set");
  g->add_option("--mediocre-n", gen.mediocre_n, "Mediocre pool size for --mix-x");
  g->add_option("--degradation", gen.degradation, "Mediocre gain degradation in [0, 1]");
  g->add_option("--mediocre-noise", gen.mediocre_noise, "Mediocre action noise std");

  TrainFlags tr;
  auto* t = app.add_subcommand("train", "Train a policy");
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--config", tr.config, "JSON training config");
  t->add_option("--data", tr.data, "Expert CSV dataset")->required();
  t->add_option("--data-suboptimal", tr.data_suboptimal, "Suboptimal CSV dataset (d2mil)");
  t->add_option("--algo", tr.algo, "bc, bc_d, two_phase_bc_d, dmil or d2mil");
  t->add_option("--seed", tr.seed, "Master seed");
  t->add_option("--steps", tr.steps, "Total training steps");
  t->add_option("--env", tr.env, "Evaluation environment");
  t->add_option("--eval-episodes", tr.eval_episodes, "Episodes per evaluation");
  t->add_option("--log-every", tr.log_every, "Log cadence in steps");

  EvalFlags ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint or a reference controller");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file");
  e->add_option("--controller", ev.controller, "lqr or zero instead of a checkpoint");
  e->add_option("--env", ev.env, "stand-still or move-straight");
  e->add_option("--episodes", ev.episodes, "Number of episodes");
  e->add_option("--seed", ev.seed, "Initial-state seed");
  e->add_option("--out", ev.out, "Optional CSV of per-episode scores");
  e->add_option("--config", ev.config, "Unused; accepted for symmetry");

  CheckFlags ch;
  auto* c = app.add_subcommand("check", "Run the property verification suite");
  c->add_option("--seed", ch.seed, "Fixture seed");
  c->add_option("--out", ch.out, "Optional JSON report");
  c->add_option("--config", ch.config, "Unused; accepted for symmetry");
  c->add_option("--inject-fault", ch.inject_fault, "Mutation fixture: dmil-weight-sign");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (g->parsed()) return cmd_gen_data(gen);
    if (t->parsed()) return cmd_train(tr);
    if (e->parsed()) return cmd_eval(ev);
    return cmd_check(ch);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitRuntime;
  }
}
