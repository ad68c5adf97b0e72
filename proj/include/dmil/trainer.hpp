#pragma once

// Training loops: DMIL, D2MIL and the BC / BC+d / 2-phase BC+d baselines,
// plus environment evaluation and the JSON-lines training log.

#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmil/checkpoint.hpp"
#include "dmil/dataset.hpp"
#include "dmil/env.hpp"
#include "dmil/objectives.hpp"
#include "dmil/rollout.hpp"

namespace dmil {

enum class Algo { bc, bc_d, two_phase_bc_d, dmil, d2mil };

inline std::string to_string(Algo a) {
  switch (a) {
    case Algo::bc: return "bc";
    case Algo::bc_d: return "bc_d";
    case Algo::two_phase_bc_d: return "two_phase_bc_d";
    case Algo::dmil: return "dmil";
    case Algo::d2mil: return "d2mil";
  }
  return "unknown";
}

inline Algo parse_algo(const std::string& s) {
  if (s == "bc") return Algo::bc;
  if (s == "bc_d" || s == "bc+d") return Algo::bc_d;
  if (s == "two_phase_bc_d" || s == "2-phase-bc+d") return Algo::two_phase_bc_d;
  if (s == "dmil") return Algo::dmil;
  if (s == "d2mil") return Algo::d2mil;
  throw ContractViolation("unknown algorithm '" + s + "'");
}

struct NetworkSizes {
  std::vector<int> policy{256, 256};
  std::vector<int> dynamics{256, 256};
  std::vector<int> discriminator{512, 512};
};

struct TrainConfig {
  Algo algo = Algo::dmil;
  HyperParams hp;
  int batch_size = 256;
  double learning_rate = 1e-4;
  int pretrain_steps = 1000;
  int total_steps = 10000;
  int phase1_steps = -1;  // two_phase_bc_d only; -1 = total_steps / 2
  RolloutConfig rollout;
  NetworkSizes nets;
  std::uint64_t seed = 0;
  int eval_every = 0;  // 0 = evaluate only after the last step
  int eval_episodes = 10;
  int log_every = 1;
  double holdout_fraction = 0.1;
  std::string env = "stand-still";

  void validate() const {
    hp.validate();
    rollout.validate();
    require(total_steps >= 0, "total_steps must be >= 0");
    require(batch_size > 0, "batch_size must be positive");
    require(learning_rate > 0.0, "learning_rate must be positive");
    require(pretrain_steps >= 0, "pretrain_steps must be >= 0");
    require(eval_every >= 0 && eval_episodes >= 0 && log_every >= 1, "bad eval/log cadence");
    require(holdout_fraction >= 0.0 && holdout_fraction < 1.0, "holdout_fraction must lie in [0, 1)");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"algo", to_string(c.algo)},
          {"alpha_pi", c.hp.alpha_pi},
          {"alpha_f", c.hp.alpha_f},
          {"eta", c.hp.eta},
          {"beta_o", c.hp.beta_o},
          {"beta_r", c.hp.beta_r},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"pretrain_steps", c.pretrain_steps},
          {"total_steps", c.total_steps},
          {"phase1_steps", c.phase1_steps},
          {"rollout",
           {{"horizon", c.rollout.horizon},
            {"branches", c.rollout.branches},
            {"start_source", c.rollout.start_source == StartSource::expert ? "expert" : "expert_and_suboptimal"},
            {"capacity", c.rollout.capacity},
            {"guard_factor", c.rollout.guard_factor}}},
          {"nets",
           {{"policy", c.nets.policy}, {"dynamics", c.nets.dynamics}, {"discriminator", c.nets.discriminator}}},
          {"seed", c.seed},
          {"eval_every", c.eval_every},
          {"eval_episodes", c.eval_episodes},
          {"log_every", c.log_every},
          {"holdout_fraction", c.holdout_fraction},
          {"env", c.env}};
}

/// Reads a config, keeping defaults for absent keys. Unknown keys are errors.
inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  static const std::vector<std::string> known{
      "algo",        "alpha_pi",   "alpha_f",      "eta",          "beta_o",        "beta_r",
      "batch_size",  "learning_rate", "pretrain_steps", "total_steps", "phase1_steps", "rollout",
      "nets",        "seed",       "eval_every",   "eval_episodes", "log_every",    "holdout_fraction",
      "env"};
  if (!j.is_object()) throw FormatError("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw FormatError("unknown config key '" + key + "'");
  }
  try {
    if (j.contains("algo")) c.algo = parse_algo(j["algo"].get<std::string>());
    c.hp.alpha_pi = j.value("alpha_pi", c.hp.alpha_pi);
    c.hp.alpha_f = j.value("alpha_f", c.hp.alpha_f);
    c.hp.eta = j.value("eta", c.hp.eta);
    c.hp.beta_o = j.value("beta_o", c.hp.beta_o);
    c.hp.beta_r = j.value("beta_r", c.hp.beta_r);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.pretrain_steps = j.value("pretrain_steps", c.pretrain_steps);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.phase1_steps = j.value("phase1_steps", c.phase1_steps);
    if (j.contains("rollout")) {
      const auto& r = j["rollout"];
      c.rollout.horizon = r.value("horizon", c.rollout.horizon);
      c.rollout.branches = r.value("branches", c.rollout.branches);
      c.rollout.capacity = r.value("capacity", c.rollout.capacity);
      c.rollout.guard_factor = r.value("guard_factor", c.rollout.guard_factor);
      if (r.contains("start_source")) {
        const auto s = r["start_source"].get<std::string>();
        if (s == "expert") c.rollout.start_source = StartSource::expert;
        else if (s == "expert_and_suboptimal") c.rollout.start_source = StartSource::expert_and_suboptimal;
        else throw FormatError("rollout.start_source must be expert or expert_and_suboptimal");
      }
    }
    if (j.contains("nets")) {
      const auto& n = j["nets"];
      c.nets.policy = n.value("policy", c.nets.policy);
      c.nets.dynamics = n.value("dynamics", c.nets.dynamics);
      c.nets.discriminator = n.value("discriminator", c.nets.discriminator);
    }
    c.seed = j.value("seed", c.seed);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_episodes = j.value("eval_episodes", c.eval_episodes);
    c.log_every = j.value("log_every", c.log_every);
    c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
    c.env = j.value("env", c.env);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  } catch (const ContractViolation& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> scores;
};

using ActionFn = std::function<Vector(const Vector&)>;

/// Episode score: steps survived (balance duration) or mean |v - v_target|
/// over the episode, where steps after a fall keep the error at termination.
inline double run_episode(const ActionFn& act, const LinearEnv& env, const Vector& initial_state, Rng& rng) {
  Vector s = initial_state;
  double error_sum = 0.0;
  for (int t = 0; t < env.max_episode_steps; ++t) {
    const auto r = step(env, s, act(s), rng);
    s = r.next_state;
    if (env.metric == ScoreMetric::velocity_tracking) {
      error_sum += std::abs(s[env.tracked_dim] - env.reference[env.tracked_dim]);
    }
    if (r.done) {
      if (env.metric == ScoreMetric::balance_duration) return static_cast<double>(t + 1);
      const double last = std::abs(s[env.tracked_dim] - env.reference[env.tracked_dim]);
      return (error_sum + last * (env.max_episode_steps - t - 1)) / env.max_episode_steps;
    }
  }
  return env.metric == ScoreMetric::balance_duration ? static_cast<double>(env.max_episode_steps)
                                                     : error_sum / env.max_episode_steps;
}

inline EvalResult evaluate(const ActionFn& act, const LinearEnv& env, int n_episodes, std::uint64_t seed) {
  Rng init(seed);
  Rng noise = Rng::stream(seed, "process-noise");
  EvalResult r;
  for (int e = 0; e < n_episodes; ++e) r.scores.push_back(run_episode(act, env, env.sample_initial_state(init), noise));
  if (r.scores.empty()) return r;
  const double n = static_cast<double>(r.scores.size());
  r.mean = std::accumulate(r.scores.begin(), r.scores.end(), 0.0) / n;
  double var = 0.0;
  for (double s : r.scores) var += (s - r.mean) * (s - r.mean);
  r.std = std::sqrt(var / n);
  return r;
}

/// Deterministic-mean rollouts of a policy: a = mu(s).
inline EvalResult evaluate(const GaussianPolicy& policy, const LinearEnv& env, int n_episodes, std::uint64_t seed) {
  require(policy.state_dim() == env.state_dim() && policy.action_dim() == env.action_dim(),
          "evaluate: policy dimensions do not match the environment");
  return evaluate([&](const Vector& s) { return policy.mean(s); }, env, n_episodes, seed);
}

// ---------------------------------------------------------------------------
// Training log
// ---------------------------------------------------------------------------

struct StepRecord {
  int step = 0;
  std::vector<std::string> updates;  // in execution order
  std::optional<double> loss_pi, loss_f, loss_dr, loss_do;
  std::optional<double> d_r_expert, d_r_suboptimal, d_r_rollout;
  std::optional<double> d_o_expert, d_o_suboptimal, d_o_rollout;
  bool pu_unlabeled_negative = false;
  std::size_t rollout_truncated = 0;
  std::size_t rollout_buffer = 0;
};

struct EvalRecord {
  int step = 0;
  EvalResult result;
};

struct PretrainRecord {
  int steps = 0;
  double holdout_nll_initial = 0.0;
  double holdout_nll_final = 0.0;
  double train_nll_final = 0.0;
};

struct TrainLog {
  std::optional<PretrainRecord> pretrain;
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;

  const EvalRecord& final_eval() const {
    require(!evals.empty(), "train log has no evaluation records");
    return evals.back();
  }
};

inline nlohmann::ordered_json to_json(const StepRecord& r) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::ordered_json {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  nlohmann::ordered_json j;
  j["type"] = "step";
  j["step"] = r.step;
  j["updates"] = r.updates;
  j["loss_pi"] = opt(r.loss_pi);
  j["loss_f"] = opt(r.loss_f);
  j["loss_dr"] = opt(r.loss_dr);
  j["loss_do"] = opt(r.loss_do);
  j["d_r_expert"] = opt(r.d_r_expert);
  j["d_r_suboptimal"] = opt(r.d_r_suboptimal);
  j["d_r_rollout"] = opt(r.d_r_rollout);
  j["d_o_expert"] = opt(r.d_o_expert);
  j["d_o_suboptimal"] = opt(r.d_o_suboptimal);
  j["d_o_rollout"] = opt(r.d_o_rollout);
  j["pu_unlabeled_negative"] = r.pu_unlabeled_negative;
  j["rollout_truncated"] = r.rollout_truncated;
  j["rollout_buffer"] = r.rollout_buffer;
  return j;
}

inline void write_jsonl(std::ostream& out, const TrainLog& log) {
  if (log.pretrain) {
    nlohmann::ordered_json j;
    j["type"] = "pretrain";
    j["steps"] = log.pretrain->steps;
    j["holdout_nll_initial"] = log.pretrain->holdout_nll_initial;
    j["holdout_nll_final"] = log.pretrain->holdout_nll_final;
    j["train_nll_final"] = log.pretrain->train_nll_final;
    out << j.dump() << '\n';
  }
  std::size_t e = 0;
  auto flush_evals = [&](int up_to) {
    for (; e < log.evals.size() && log.evals[e].step <= up_to; ++e) {
      nlohmann::ordered_json j;
      j["type"] = "eval";
      j["step"] = log.evals[e].step;
      j["mean"] = log.evals[e].result.mean;
      j["std"] = log.evals[e].result.std;
      j["scores"] = log.evals[e].result.scores;
      out << j.dump() << '\n';
    }
  };
  for (const auto& r : log.steps) {
    flush_evals(r.step - 1);
    out << to_json(r).dump() << '\n';
  }
  flush_evals(std::numeric_limits<int>::max());
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct TrainResult {
  ModelSet models;
  TrainLog log;
};

/// Throws std::logic_error unless the step's updates follow d_r, d_o, pi, f
/// (each at most once, any subset).
inline void check_update_order(const StepRecord& rec) {
  static const std::vector<std::string> canonical{"d_r", "d_o", "pi", "f"};
  std::size_t pos = 0;
  for (const auto& u : rec.updates) {
    auto it = std::find(canonical.begin() + static_cast<std::ptrdiff_t>(pos), canonical.end(), u);
    if (it == canonical.end()) throw std::logic_error("step " + std::to_string(rec.step) + ": update order violated");
    pos = static_cast<std::size_t>(it - canonical.begin()) + 1;
  }
}

namespace detail {

inline double mean_of(const Vector& v) { return v.size() ? v.mean() : 0.0; }
inline std::optional<double> mean_opt(const Vector& v) {
  return v.size() ? std::optional<double>(v.mean()) : std::nullopt;
}

inline void check_finite(double v, int step, const char* what) {
  if (!std::isfinite(v)) throw NonFiniteError("step " + std::to_string(step) + ": non-finite " + what);
}

class Trainer {
 public:
  Trainer(const TrainConfig& config, const Dataset& expert, const Dataset* suboptimal)
      : cfg_(config),
        expert_(expert),
        suboptimal_(suboptimal ? *suboptimal : Dataset{expert.state_dim, expert.action_dim, {}, {}, {}}),
        buffer_(config.rollout.capacity),
        rollout_rng_(Rng::stream(config.seed, "rollout")),
        batch_rng_(Rng::stream(config.seed, "batch")),
        pretrain_rng_(Rng::stream(config.seed, "pretrain")) {
    cfg_.validate();
    require(!expert_.empty(), "training needs a nonempty expert dataset");
    if (cfg_.algo == Algo::d2mil) {
      require(!suboptimal_.empty() || cfg_.hp.beta_o == 0.0, "d2mil needs a nonempty suboptimal dataset");
    }
    require(suboptimal_.empty() ||
                (suboptimal_.state_dim == expert_.state_dim && suboptimal_.action_dim == expert_.action_dim),
            "expert and suboptimal datasets have different dimensions");
    sd_ = expert_.state_dim;
    ad_ = expert_.action_dim;
    real_ = merge(expert_, suboptimal_);
    if (cfg_.algo == Algo::d2mil && cfg_.rollout.start_source == StartSource::expert_and_suboptimal) {
      rollout_source_ = &real_;
    } else {
      rollout_source_ = &expert_;
    }
    guard_ = real_.state_max_abs();
    init_models();
  }

  TrainResult run(const LinearEnv* eval_env) {
    eval_env_ = eval_env;
    eval_seed_ = Rng::stream(cfg_.seed, "eval").next_seed();
    if (uses_dynamics()) pretrain_dynamics();
    for (int t = 1; t <= cfg_.total_steps; ++t) {
      StepRecord rec;
      rec.step = t;
      switch (cfg_.algo) {
        case Algo::bc: step_bc(rec); break;
        case Algo::bc_d: step_bc_d(rec, true); break;
        case Algo::two_phase_bc_d: step_two_phase(rec); break;
        case Algo::dmil: step_dmil(rec); break;
        case Algo::d2mil: step_d2mil(rec); break;
      }
      check_update_order(rec);
      if (t % cfg_.log_every == 0 || t == 1 || t == cfg_.total_steps) log_.steps.push_back(std::move(rec));
      if (cfg_.eval_every > 0 && t % cfg_.eval_every == 0 && t != cfg_.total_steps) run_eval(t);
    }
    run_eval(cfg_.total_steps);
    TrainResult out{std::move(models_), std::move(log_)};
    if (!uses_dynamics()) out.models.dynamics = DynamicsModel();
    if (cfg_.algo != Algo::dmil && cfg_.algo != Algo::d2mil) out.models.disc_r = RolloutDiscriminator();
    if (cfg_.algo != Algo::d2mil) out.models.disc_o = OptimalityDiscriminator();
    return out;
  }

 private:
  bool uses_dynamics() const { return cfg_.algo != Algo::bc; }

  void init_models() {
    Rng init = Rng::stream(cfg_.seed, "init");
    models_.policy = GaussianPolicy::create(sd_, ad_, cfg_.nets.policy, init);
    models_.dynamics = DynamicsModel::create(sd_, ad_, cfg_.nets.dynamics, init);
    models_.disc_r = RolloutDiscriminator::create(sd_, ad_, cfg_.nets.discriminator, init);
    models_.disc_o = OptimalityDiscriminator::create(sd_, ad_, cfg_.nets.discriminator, init);

    // Fixed input/output units from the real data.
    const Batch all = real_.to_batch();
    Matrix sa(sd_ + ad_, all.size());
    sa.topRows(sd_) = all.states;
    sa.bottomRows(ad_) = all.actions;
    const Normalizer state_norm = Normalizer::fit(all.states, 1e-8);
    const Normalizer sa_norm = Normalizer::fit(sa, 1e-8);
    models_.policy.input_normalizer() = state_norm;
    models_.dynamics.input_normalizer() = sa_norm;
    models_.dynamics.output_scale() =
        Normalizer::fit(all.next_states - all.states, 1e-8).scale;
    auto disc_norm = [&](int log_features) {
      Normalizer n;
      n.shift = Vector::Zero(sd_ + ad_ + log_features);
      n.scale = Vector::Constant(sd_ + ad_ + log_features, kLogFeatureScale);
      n.shift.head(sd_ + ad_) = sa_norm.shift;
      n.scale.head(sd_ + ad_) = sa_norm.scale;
      return n;
    };
    models_.disc_r.input_normalizer() = disc_norm(2);
    models_.disc_o.input_normalizer() = disc_norm(1);

    const AdamConfig adam{cfg_.learning_rate};
    opt_policy_ = AdamState(adam);
    opt_dynamics_ = AdamState(adam);
    opt_disc_r_ = AdamState(adam);
    opt_disc_o_ = AdamState(adam);
  }

  // Algorithm line 2: preliminary dynamics model on the real data, with a
  // held-out tail used to confirm the fit generalizes.
  void pretrain_dynamics() {
    const Dataset& source = cfg_.algo == Algo::d2mil ? real_ : expert_;
    auto [train, holdout] = split_tail(source, cfg_.holdout_fraction);
    if (train.empty()) train = source;
    PretrainRecord rec;
    rec.steps = cfg_.pretrain_steps;
    const Batch held = holdout.empty() ? train.to_batch() : holdout.to_batch();
    rec.holdout_nll_initial = dynamics_nll_loss(models_.dynamics, held);
    for (int k = 0; k < cfg_.pretrain_steps; ++k) {
      const Batch b = train.sample(static_cast<std::size_t>(cfg_.batch_size), pretrain_rng_);
      DynamicsGradient g = models_.dynamics.zero_gradient();
      check_finite(dynamics_nll_loss(models_.dynamics, b, &g), 0, "dynamics pretraining loss");
      adam_step(opt_dynamics_, models_.dynamics.blocks(), g.blocks(), 0);
    }
    rec.holdout_nll_final = dynamics_nll_loss(models_.dynamics, held);
    rec.train_nll_final = dynamics_nll_loss(models_.dynamics, train.to_batch());
    check_finite(rec.holdout_nll_final, 0, "held-out dynamics NLL");
    log_.pretrain = rec;
  }

  static void adam_step(AdamState& opt, std::vector<ParamBlock> params, std::vector<ParamBlock> grads, int step) {
    try {
      opt.step(params, dmil::as_const(grads));
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("step " + std::to_string(step) + ": " + e.what());
    }
  }

  void grow_rollouts(StepRecord& rec) {
    if (cfg_.rollout.branches > 0) {
      const Batch starts = rollout_source_->sample(static_cast<std::size_t>(cfg_.rollout.branches), rollout_rng_);
      auto res = generate_rollouts(models_.policy, models_.dynamics, starts.states, cfg_.rollout, guard_, rollout_rng_);
      rec.rollout_truncated = res.truncated;
      buffer_.push(res.transitions);
    }
    rec.rollout_buffer = buffer_.size();
  }

  Batch sample_expert() { return expert_.sample(static_cast<std::size_t>(cfg_.batch_size), batch_rng_); }
  Batch sample_suboptimal() { return suboptimal_.sample(static_cast<std::size_t>(cfg_.batch_size), batch_rng_); }
  Batch sample_rollout() { return buffer_.sample_batch(static_cast<std::size_t>(cfg_.batch_size), sd_, ad_, batch_rng_); }

  void update_policy_bc(const Batch& expert, const Batch& rollout, StepRecord& rec) {
    PolicyGradient g = models_.policy.zero_gradient();
    const double loss = bc_finetune_loss(models_.policy, expert, rollout, &g);
    check_finite(loss, rec.step, "policy loss");
    adam_step(opt_policy_, models_.policy.blocks(), g.blocks(), rec.step);
    models_.policy.clamp_parameters();
    rec.loss_pi = loss;
    rec.updates.push_back("pi");
  }

  void update_dynamics_mle(const Batch& batch, StepRecord& rec) {
    DynamicsGradient g = models_.dynamics.zero_gradient();
    const double loss = dynamics_nll_loss(models_.dynamics, batch, &g);
    check_finite(loss, rec.step, "dynamics loss");
    adam_step(opt_dynamics_, models_.dynamics.blocks(), g.blocks(), rec.step);
    rec.loss_f = loss;
    rec.updates.push_back("f");
  }

  void step_bc(StepRecord& rec) { update_policy_bc(sample_expert(), Batch::empty_like(sd_, ad_), rec); }

  void step_bc_d(StepRecord& rec, bool train_dynamics) {
    grow_rollouts(rec);
    const Batch e = sample_expert();
    const Batch r = sample_rollout();
    update_policy_bc(e, r, rec);
    if (train_dynamics) update_dynamics_mle(e, rec);
  }

  void step_two_phase(StepRecord& rec) {
    const int phase1 = cfg_.phase1_steps >= 0 ? cfg_.phase1_steps : cfg_.total_steps / 2;
    if (rec.step <= phase1) {
      const Batch e = sample_expert();
      update_policy_bc(e, Batch::empty_like(sd_, ad_), rec);
      update_dynamics_mle(e, rec);
    } else {
      step_bc_d(rec, false);
    }
  }

  void step_dmil(StepRecord& rec) {
    grow_rollouts(rec);
    const Batch e = sample_expert();
    const Batch r = sample_rollout();

    // d_r update on detached log pi / log f features.
    const Matrix fe = rollout_features(models_, e);
    const Matrix fr = r.empty() ? Matrix(models_.disc_r.feature_dim(), 0) : rollout_features(models_, r);
    if (!r.empty()) {
      DiscriminatorGradient g = models_.disc_r.zero_gradient();
      const double loss = rollout_disc_loss(models_.disc_r, fe, fr, &g);
      check_finite(loss, rec.step, "discriminator loss");
      adam_step(opt_disc_r_, models_.disc_r.blocks(), g.blocks(), rec.step);
      rec.loss_dr = loss;
      rec.updates.push_back("d_r");
    }
    const Vector de = models_.disc_r.output(fe);
    const Vector dr = r.empty() ? Vector(0) : Vector(models_.disc_r.output(fr));
    rec.d_r_expert = mean_of(de);
    rec.d_r_rollout = mean_opt(dr);

    {
      PolicyGradient g = models_.policy.zero_gradient();
      const double loss = dmil_policy_loss(models_.policy, e, r, de, dr, cfg_.hp.alpha_pi, &g);
      check_finite(loss, rec.step, "policy loss");
      adam_step(opt_policy_, models_.policy.blocks(), g.blocks(), rec.step);
      models_.policy.clamp_parameters();
      rec.loss_pi = loss;
      rec.updates.push_back("pi");
    }
    {
      DynamicsGradient g = models_.dynamics.zero_gradient();
      const double loss = dmil_dynamics_loss(models_.dynamics, e, r, de, dr, cfg_.hp.alpha_f, &g);
      check_finite(loss, rec.step, "dynamics loss");
      adam_step(opt_dynamics_, models_.dynamics.blocks(), g.blocks(), rec.step);
      rec.loss_f = loss;
      rec.updates.push_back("f");
    }
  }

  void step_d2mil(StepRecord& rec) {
    grow_rollouts(rec);
    const Batch e = sample_expert();
    const Batch o = sample_suboptimal();
    const Batch r = sample_rollout();
    const Batch real = concat(e, o);
    const Batch unlabeled = concat(o, r);

    const Matrix fr_real = rollout_features(models_, real);
    const Matrix fr_roll = r.empty() ? Matrix(models_.disc_r.feature_dim(), 0) : rollout_features(models_, r);
    if (!r.empty()) {
      DiscriminatorGradient g = models_.disc_r.zero_gradient();
      const double loss = rollout_disc_loss(models_.disc_r, fr_real, fr_roll, &g);
      check_finite(loss, rec.step, "rollout discriminator loss");
      adam_step(opt_disc_r_, models_.disc_r.blocks(), g.blocks(), rec.step);
      rec.loss_dr = loss;
      rec.updates.push_back("d_r");
    }
    const Matrix fo_e = optimality_features(models_, e);
    const Matrix fo_u =
        unlabeled.empty() ? Matrix(models_.disc_o.feature_dim(), 0) : optimality_features(models_, unlabeled);
    if (!unlabeled.empty()) {
      DiscriminatorGradient g = models_.disc_o.zero_gradient();
      const PuTerms terms = pu_disc_terms(models_.disc_o, fo_e, fo_u, cfg_.hp.eta, &g);
      check_finite(terms.total(), rec.step, "optimality discriminator loss");
      adam_step(opt_disc_o_, models_.disc_o.blocks(), g.blocks(), rec.step);
      rec.loss_do = terms.total();
      rec.pu_unlabeled_negative = terms.unlabeled < 0.0;
      rec.updates.push_back("d_o");
    }

    // d values under the updated discriminators (features are unchanged).
    const Vector dr_real = models_.disc_r.output(fr_real);
    const Vector dr_roll = r.empty() ? Vector(0) : Vector(models_.disc_r.output(fr_roll));
    const Vector do_e = models_.disc_o.output(fo_e);
    const Vector do_u = fo_u.cols() ? Vector(models_.disc_o.output(fo_u)) : Vector(0);
    const auto ne = e.size(), no = o.size();
    const DValues dv_e{dr_real.head(ne), do_e};
    const DValues dv_o{dr_real.tail(no), do_u.head(no)};
    const DValues dv_r{dr_roll, do_u.tail(do_u.size() - no)};
    rec.d_r_expert = mean_of(dv_e.d_r);
    rec.d_r_suboptimal = mean_opt(dv_o.d_r);
    rec.d_r_rollout = mean_opt(dv_r.d_r);
    rec.d_o_expert = mean_of(dv_e.d_o);
    rec.d_o_suboptimal = mean_opt(dv_o.d_o);
    rec.d_o_rollout = mean_opt(dv_r.d_o);

    {
      PolicyGradient g = models_.policy.zero_gradient();
      const double loss = d2mil_policy_loss(models_.policy, e, o, r, dv_e, dv_o, dv_r, cfg_.hp, &g);
      check_finite(loss, rec.step, "policy loss");
      adam_step(opt_policy_, models_.policy.blocks(), g.blocks(), rec.step);
      models_.policy.clamp_parameters();
      rec.loss_pi = loss;
      rec.updates.push_back("pi");
    }
    {
      DynamicsGradient g = models_.dynamics.zero_gradient();
      const double loss = d2mil_dynamics_loss(models_.dynamics, real, r, dr_real, dr_roll, cfg_.hp.alpha_f, &g);
      check_finite(loss, rec.step, "dynamics loss");
      adam_step(opt_dynamics_, models_.dynamics.blocks(), g.blocks(), rec.step);
      rec.loss_f = loss;
      rec.updates.push_back("f");
    }
  }

  void run_eval(int step) {
    if (!eval_env_ || cfg_.eval_episodes <= 0) return;
    log_.evals.push_back({step, evaluate(models_.policy, *eval_env_, cfg_.eval_episodes, eval_seed_)});
  }

  static constexpr double kLogFeatureScale = 1.0;

  TrainConfig cfg_;
  const Dataset& expert_;
  Dataset suboptimal_;
  Dataset real_;
  const Dataset* rollout_source_ = nullptr;
  int sd_ = 0;
  int ad_ = 0;
  Vector guard_;
  ModelSet models_;
  AdamState opt_policy_, opt_dynamics_, opt_disc_r_, opt_disc_o_;
  RolloutBuffer buffer_;
  Rng rollout_rng_;
  Rng batch_rng_;
  Rng pretrain_rng_;
  const LinearEnv* eval_env_ = nullptr;
  std::uint64_t eval_seed_ = 0;
  TrainLog log_;
};

}  // namespace detail

/// DMIL training loop.
inline TrainResult train_dmil(TrainConfig config, const Dataset& expert, const LinearEnv* eval_env = nullptr) {
  config.algo = Algo::dmil;
  return detail::Trainer(config, expert, nullptr).run(eval_env);
}

/// D2MIL training loop. An empty suboptimal set is accepted only with beta_o = 0.
inline TrainResult train_d2mil(TrainConfig config, const Dataset& expert, const Dataset& suboptimal,
                               const LinearEnv* eval_env = nullptr) {
  config.algo = Algo::d2mil;
  return detail::Trainer(config, expert, &suboptimal).run(eval_env);
}

/// BC, BC+d or 2-phase BC+d, selected by config.algo.
inline TrainResult train_baseline(const TrainConfig& config, const Dataset& expert,
                                  const LinearEnv* eval_env = nullptr) {
  require(config.algo == Algo::bc || config.algo == Algo::bc_d || config.algo == Algo::two_phase_bc_d,
          "train_baseline: algo must be bc, bc_d or two_phase_bc_d");
  return detail::Trainer(config, expert, nullptr).run(eval_env);
}

inline TrainResult train(const TrainConfig& config, const Dataset& expert, const Dataset* suboptimal,
                         const LinearEnv* eval_env = nullptr) {
  switch (config.algo) {
    case Algo::dmil: return train_dmil(config, expert, eval_env);
    case Algo::d2mil:
      require(suboptimal != nullptr, "d2mil needs a suboptimal dataset");
      return train_d2mil(config, expert, *suboptimal, eval_env);
    default: return train_baseline(config, expert, eval_env);
  }
}

}  // namespace dmil
