#pragma once

// Dataset-generation protocols shared by the CLI and the experiment suite:
// clean expert data, state-corrupted expert data and expert/mediocre mixes.

#include <cstdint>
#include <optional>
#include <string>

#include "dmil/dataset.hpp"
#include "dmil/env.hpp"

namespace dmil {

struct DataProtocol {
  std::string env = "stand-still";
  std::size_t n = 2000;
  int episode_steps = 100;
  double noise_fraction = 0.05;       // exploration noise as a fraction of the expert action std
  std::optional<double> noise_std;    // absolute override
  double corrupt_fraction = 0.0;
  double corrupt_scale = 1.0;
  std::optional<double> mix_x;        // set -> also build a suboptimal set
  std::size_t mediocre_n = 5000;
  double degradation = 0.5;
  double mediocre_noise_std = 20.0;   // [N], per-step action noise of the mediocre demonstrator
  std::uint64_t seed = 0;

  void validate() const {
    require(n > 0, "n must be positive");
    require(episode_steps >= 0, "episode_steps must be >= 0");
    require(noise_fraction >= 0.0 && (!noise_std || *noise_std >= 0.0), "noise must be nonnegative");
    require(corrupt_fraction >= 0.0 && corrupt_fraction <= 1.0, "corrupt fraction must lie in [0, 1]");
    require(corrupt_scale >= 0.0, "corrupt scale must be nonnegative");
    require(!mix_x || (*mix_x >= 0.0 && *mix_x < 1.0), "mix x must lie in [0, 1)");
    require(!mix_x || mediocre_n > 0, "mediocre pool size must be positive");
    require(degradation >= 0.0 && degradation <= 1.0, "degradation must lie in [0, 1]");
    require(mediocre_noise_std >= 0.0, "mediocre noise must be nonnegative");
  }
};

inline constexpr std::uint64_t kPilotSeed = 0;

/// Exploration noise: a fraction of the noiseless expert's action std,
/// measured on pilot episodes with a fixed seed.
inline double expert_noise_std(const LinearEnv& env, const LqrController& lqr, int episode_steps, double fraction) {
  return fraction * controller_action_std(env, lqr, episode_steps, kPilotSeed);
}

struct GeneratedData {
  Dataset expert;
  std::optional<Dataset> suboptimal;
};

inline std::uint64_t derive_seed(std::uint64_t seed, const char* purpose) { return Rng::stream(seed, purpose).next_seed(); }

inline GeneratedData generate_data(const DataProtocol& p) {
  p.validate();
  const LinearEnv env = make_env(p.env);
  const LqrController lqr = make_lqr_expert(env);
  const double noise = p.noise_std ? *p.noise_std : expert_noise_std(env, lqr, p.episode_steps, p.noise_fraction);

  Dataset expert = collect_expert_dataset(env, lqr, p.n, noise, derive_seed(p.seed, "expert"), p.episode_steps);
  expert.meta["seed"] = p.seed;
  if (p.corrupt_fraction > 0.0 && p.corrupt_scale > 0.0) {
    expert = corrupt_states(expert, p.corrupt_fraction, p.corrupt_scale, derive_seed(p.seed, "corrupt"));
  }
  GeneratedData out{std::move(expert), std::nullopt};
  if (p.mix_x) {
    CollectOptions opt;
    opt.n_transitions = p.mediocre_n;
    opt.noise_std = p.mediocre_noise_std;
    opt.seed = derive_seed(p.seed, "mediocre");
    opt.episode_steps = p.episode_steps;
    opt.origin = Origin::suboptimal;
    opt.check_balance = false;
    Dataset mediocre = collect_dataset(env, mediocre_controller(env, p.degradation, p.mediocre_noise_std), opt);
    mediocre.meta["generator"]["degradation"] = p.degradation;
    auto mixed = build_mixed_datasets(out.expert, mediocre, *p.mix_x, derive_seed(p.seed, "mix"));
    out.expert = std::move(mixed.expert);
    out.suboptimal = std::move(mixed.suboptimal);
  }
  return out;
}

}  // namespace dmil
