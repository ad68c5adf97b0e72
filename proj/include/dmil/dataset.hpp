#pragma once

// Transition datasets: demonstration collection, the state-noise corruption
// protocol, expert/mediocre mixing, and the CSV file format.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dmil/batch.hpp"
#include "dmil/env.hpp"

namespace dmil {

struct Transition {
  Vector s;
  Vector a;
  Vector s_next;
  Origin origin = Origin::expert;
};

/// An ordered list of transitions grouped into trajectories. `episode_starts`
/// holds the index of the first transition of every trajectory.
struct Dataset {
  int state_dim = 0;
  int action_dim = 0;
  std::vector<Transition> transitions;
  std::vector<std::size_t> episode_starts;
  nlohmann::json meta = nlohmann::json::object();

  std::size_t size() const { return transitions.size(); }
  bool empty() const { return transitions.empty(); }

  /// [begin, end) index ranges, one per trajectory.
  std::vector<std::pair<std::size_t, std::size_t>> trajectories() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t k = 0; k < episode_starts.size(); ++k) {
      const std::size_t end = k + 1 < episode_starts.size() ? episode_starts[k + 1] : transitions.size();
      out.emplace_back(episode_starts[k], end);
    }
    return out;
  }

  void append_trajectory(const std::vector<Transition>& trajectory) {
    if (trajectory.empty()) return;
    episode_starts.push_back(transitions.size());
    transitions.insert(transitions.end(), trajectory.begin(), trajectory.end());
  }

  Batch gather(const std::vector<std::size_t>& indices) const {
    Batch b{Matrix(state_dim, static_cast<Eigen::Index>(indices.size())),
            Matrix(action_dim, static_cast<Eigen::Index>(indices.size())),
            Matrix(state_dim, static_cast<Eigen::Index>(indices.size())),
            {}};
    b.origins.reserve(indices.size());
    for (std::size_t j = 0; j < indices.size(); ++j) {
      const auto& t = transitions.at(indices[j]);
      const auto c = static_cast<Eigen::Index>(j);
      b.states.col(c) = t.s;
      b.actions.col(c) = t.a;
      b.next_states.col(c) = t.s_next;
      b.origins.push_back(t.origin);
    }
    return b;
  }

  Batch to_batch() const {
    std::vector<std::size_t> all(size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    return gather(all);
  }

  /// Uniform with replacement; n draws from `rng`. Empty dataset -> empty batch.
  Batch sample(std::size_t n, Rng& rng) const {
    if (empty()) return Batch::empty_like(state_dim, action_dim);
    std::vector<std::size_t> idx(n);
    for (auto& i : idx) i = rng.index(size());
    return gather(idx);
  }

  /// Per-dimension population std of the stored states.
  Vector state_std() const {
    require(!empty(), "state_std: empty dataset");
    const Matrix s = to_batch().states;
    const Vector mean = s.rowwise().mean();
    return ((s.colwise() - mean).array().square().rowwise().sum() / static_cast<double>(size())).sqrt();
  }

  /// Per-dimension max |x| over states and next states.
  Vector state_max_abs() const {
    Vector m = Vector::Zero(state_dim);
    for (const auto& t : transitions) m = m.cwiseMax(t.s.cwiseAbs()).cwiseMax(t.s_next.cwiseAbs());
    return m;
  }

  std::size_t count(Origin o) const {
    return static_cast<std::size_t>(
        std::count_if(transitions.begin(), transitions.end(), [o](const Transition& t) { return t.origin == o; }));
  }
};

inline Dataset merge(const Dataset& a, const Dataset& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  require(a.state_dim == b.state_dim && a.action_dim == b.action_dim, "merge: dataset dimensions differ");
  Dataset out = a;
  for (auto [begin, end] : b.trajectories()) {
    out.append_trajectory({b.transitions.begin() + static_cast<std::ptrdiff_t>(begin),
                           b.transitions.begin() + static_cast<std::ptrdiff_t>(end)});
  }
  return out;
}

/// Splits a dataset 90/10 (or any fraction) by trajectory order: the last
/// `fraction` of transitions becomes the held-out part.
inline std::pair<Dataset, Dataset> split_tail(const Dataset& d, double fraction) {
  require(fraction >= 0.0 && fraction < 1.0, "split_tail: fraction must lie in [0, 1)");
  const std::size_t held = static_cast<std::size_t>(static_cast<double>(d.size()) * fraction);
  const std::size_t cut = d.size() - held;
  Dataset train = d, test = d;
  train.transitions.assign(d.transitions.begin(), d.transitions.begin() + static_cast<std::ptrdiff_t>(cut));
  test.transitions.assign(d.transitions.begin() + static_cast<std::ptrdiff_t>(cut), d.transitions.end());
  train.episode_starts.clear();
  test.episode_starts.clear();
  for (std::size_t s : d.episode_starts) {
    if (s < cut) train.episode_starts.push_back(s);
    else test.episode_starts.push_back(s - cut);
  }
  if (!test.empty() && (test.episode_starts.empty() || test.episode_starts.front() != 0)) {
    test.episode_starts.insert(test.episode_starts.begin(), 0);
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Collection
// ---------------------------------------------------------------------------

struct CollectOptions {
  std::size_t n_transitions = 0;
  double noise_std = 0.0;    // Gaussian action noise on top of the controller
  std::uint64_t seed = 0;
  int episode_steps = 0;     // trajectory length cap; 0 = env.max_episode_steps
  Origin origin = Origin::expert;
  bool check_balance = true; // fail if episodes average fewer than 50 steps
};

struct CollectStats {
  std::size_t episodes = 0;
  double mean_completed_length = 0.0;
};

/// Rolls `controller` (with its gain, reference and the given noise) in the
/// environment, restarting on termination or after `episode_steps`, until
/// exactly n transitions are stored.
inline Dataset collect_dataset(const LinearEnv& env, const LqrController& controller, const CollectOptions& opt,
                               CollectStats* stats = nullptr) {
  require(opt.n_transitions > 0, "collect: n_transitions must be positive");
  const int cap = opt.episode_steps > 0 ? opt.episode_steps : env.max_episode_steps;
  Rng rng(opt.seed);
  LqrController policy = controller;
  policy.noise_std = opt.noise_std;

  Dataset d;
  d.state_dim = env.state_dim();
  d.action_dim = env.action_dim();
  std::size_t completed = 0;
  std::size_t completed_steps = 0;
  std::size_t episodes = 0;
  while (d.size() < opt.n_transitions) {
    std::vector<Transition> traj;
    Vector s = env.sample_initial_state(rng);
    bool finished = false;
    while (d.size() + traj.size() < opt.n_transitions) {
      const Vector a = policy.act(s, rng);
      const auto r = step(env, s, a, rng);
      traj.push_back({s, a, r.next_state, opt.origin});
      s = r.next_state;
      if (r.done || static_cast<int>(traj.size()) >= cap) {
        finished = true;
        break;
      }
    }
    if (finished) {
      ++completed;
      completed_steps += traj.size();
    }
    ++episodes;
    d.append_trajectory(traj);
  }
  const double mean_len = completed > 0 ? static_cast<double>(completed_steps) / static_cast<double>(completed) : 0.0;
  if (opt.check_balance && completed > 0 && mean_len < 50.0) {
    throw std::runtime_error("collect: controller fails to balance (mean episode length " + std::to_string(mean_len) +
                             " < 50); check the LQR setup");
  }
  if (stats) *stats = {episodes, mean_len};
  d.meta = {{"env", env.name},
            {"constants",
             {{"cart_mass", env.constants.cart_mass},
              {"pendulum_mass", env.constants.pendulum_mass},
              {"pendulum_length", env.constants.pendulum_length},
              {"gravity", env.constants.gravity},
              {"dt", env.constants.dt}}},
            {"seed", opt.seed},
            {"generator",
             {{"origin", std::string(to_string(opt.origin))},
              {"noise_std", opt.noise_std},
              {"episode_steps", cap},
              {"n_transitions", opt.n_transitions}}}};
  return d;
}

inline Dataset collect_expert_dataset(const LinearEnv& env, const LqrController& lqr, std::size_t n_transitions,
                                      double noise_std, std::uint64_t seed, int episode_steps = 0) {
  return collect_dataset(env, lqr, {n_transitions, noise_std, seed, episode_steps, Origin::expert, true});
}

/// Std of the noiseless controller's actions over `episodes` trajectories of
/// `episode_steps` steps from d_0.
inline double controller_action_std(const LinearEnv& env, const LqrController& controller, int episode_steps,
                                    std::uint64_t seed, int episodes = 20) {
  const int cap = episode_steps > 0 ? episode_steps : env.max_episode_steps;
  Rng rng(seed);
  std::vector<double> actions;
  for (int e = 0; e < episodes; ++e) {
    Vector s = env.sample_initial_state(rng);
    for (int t = 0; t < cap; ++t) {
      const Vector a = controller.act(s);
      actions.insert(actions.end(), a.data(), a.data() + a.size());
      const auto r = step(env, s, a, rng);
      s = r.next_state;
      if (r.done) break;
    }
  }
  const double mean = std::accumulate(actions.begin(), actions.end(), 0.0) / static_cast<double>(actions.size());
  double var = 0.0;
  for (double a : actions) var += (a - mean) * (a - mean);
  return std::sqrt(var / static_cast<double>(actions.size()));
}

// ---------------------------------------------------------------------------
// Corruption and mixing protocols
// ---------------------------------------------------------------------------

/// Adds N(0, (sigma_scale * sigma_dim)^2) to the stored state s of a random
/// round(fraction * n) transitions, sigma_dim being the dataset's per-dimension
/// state std. s_next fields are left untouched.
inline Dataset corrupt_states(const Dataset& d, double fraction, double sigma_scale, std::uint64_t seed) {
  require(!d.empty(), "corrupt_states: empty dataset");
  require(fraction >= 0.0 && fraction <= 1.0, "corrupt_states: fraction must lie in [0, 1]");
  require(sigma_scale >= 0.0, "corrupt_states: sigma_scale must be nonnegative");
  Dataset out = d;
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(d.size())));
  if (k == 0 || sigma_scale == 0.0) return out;
  const Vector sigma = d.state_std() * sigma_scale;
  Rng rng(seed);
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i : idx) {
    for (Eigen::Index j = 0; j < d.state_dim; ++j) out.transitions[i].s[j] += sigma[j] * rng.normal();
  }
  out.meta["corruption"] = {{"fraction", fraction}, {"sigma_scale", sigma_scale}, {"seed", seed}, {"rows", k}};
  return out;
}

struct MixedDatasets {
  Dataset expert;      // D_e
  Dataset suboptimal;  // D_o
  std::size_t expert_trajectories_in_suboptimal = 0;
};

/// exp-med-X protocol: floor(x * T) of the T expert trajectories (chosen at
/// random) join the mediocre pool to form D_o; the rest form D_e. Origin tags
/// keep the generating controller, membership is given by the returned set.
inline MixedDatasets build_mixed_datasets(const Dataset& expert_pool, const Dataset& mediocre_pool, double x_fraction,
                                          std::uint64_t seed) {
  require(x_fraction >= 0.0 && x_fraction < 1.0, "build_mixed_datasets: x must lie in [0, 1)");
  const auto trajs = expert_pool.trajectories();
  if (trajs.empty()) throw ContractViolation("build_mixed_datasets: expert pool is empty, D_e would be empty");
  const auto total = trajs.size();
  auto moved = static_cast<std::size_t>(std::floor(x_fraction * static_cast<double>(total)));
  moved = std::min(moved, total - 1);

  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<bool> to_suboptimal(total, false);
  for (std::size_t k = 0; k < moved; ++k) to_suboptimal[order[k]] = true;

  MixedDatasets out;
  out.expert.state_dim = out.suboptimal.state_dim = expert_pool.state_dim;
  out.expert.action_dim = out.suboptimal.action_dim = expert_pool.action_dim;
  Dataset expert_part = out.suboptimal;
  for (std::size_t t = 0; t < total; ++t) {
    const auto [begin, end] = trajs[t];
    std::vector<Transition> traj(expert_pool.transitions.begin() + static_cast<std::ptrdiff_t>(begin),
                                 expert_pool.transitions.begin() + static_cast<std::ptrdiff_t>(end));
    (to_suboptimal[t] ? expert_part : out.expert).append_trajectory(traj);
  }
  out.suboptimal = merge(expert_part, mediocre_pool);
  out.expert_trajectories_in_suboptimal = moved;
  out.expert.meta = expert_pool.meta;
  out.expert.meta["mix"] = {{"x", x_fraction}, {"seed", seed}, {"role", "expert"},
                            {"expert_trajectories", total - moved}};
  out.suboptimal.meta = mediocre_pool.meta;
  out.suboptimal.meta["mix"] = {{"x", x_fraction}, {"seed", seed}, {"role", "suboptimal"},
                                {"expert_trajectories", moved},
                                {"mediocre_trajectories", mediocre_pool.trajectories().size()}};
  return out;
}

// ---------------------------------------------------------------------------
// CSV format: "# {json}" line, header s0..,a0..,sp0..,origin, then rows with
// 17 significant digits.
// ---------------------------------------------------------------------------

inline std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_dataset_csv(std::ostream& out, const Dataset& d) {
  out << "# " << d.meta.dump() << '\n';
  for (int i = 0; i < d.state_dim; ++i) out << 's' << i << ',';
  for (int i = 0; i < d.action_dim; ++i) out << 'a' << i << ',';
  for (int i = 0; i < d.state_dim; ++i) out << "sp" << i << ',';
  out << "origin\n";
  for (const auto& t : d.transitions) {
    for (double v : t.s) out << format_double(v) << ',';
    for (double v : t.a) out << format_double(v) << ',';
    for (double v : t.s_next) out << format_double(v) << ',';
    out << to_string(t.origin) << '\n';
  }
}

inline std::string dataset_to_csv(const Dataset& d) {
  std::ostringstream os;
  write_dataset_csv(os, d);
  return os.str();
}

inline void save_dataset_csv(const std::string& path, const Dataset& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  write_dataset_csv(out, d);
  if (!out) throw FormatError("failed writing '" + path + "'");
}

/// Parses the CSV format. Trajectory boundaries are recovered by continuity:
/// a row starts a new trajectory unless its s equals the previous row's s'.
inline Dataset read_dataset_csv(std::istream& in, const std::string& source = "<stream>") {
  Dataset d;
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) throw FormatError(source + ": missing '# {json}' line");
  try {
    d.meta = nlohmann::json::parse(line.substr(2));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": bad JSON comment line: " + e.what());
  }
  if (!std::getline(in, line)) throw FormatError(source + ": missing header row");
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  if (cols.empty() || cols.back() != "origin") throw FormatError(source + ": header must end with 'origin'");
  for (const auto& c : cols) {
    if (c.rfind("sp", 0) == 0) ++d.state_dim;
    else if (c[0] == 'a') ++d.action_dim;
  }
  const std::size_t width = static_cast<std::size_t>(2 * d.state_dim + d.action_dim) + 1;
  if (cols.size() != width || d.state_dim == 0 || d.action_dim == 0) {
    throw FormatError(source + ": header does not match s0..,a0..,sp0..,origin");
  }
  for (int i = 0; i < d.state_dim; ++i) {
    if (cols[static_cast<std::size_t>(i)] != "s" + std::to_string(i)) throw FormatError(source + ": bad state header");
  }

  std::size_t row = 2;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) f.push_back(c);
    if (f.size() != width) throw FormatError(source + ": line " + std::to_string(row) + " has wrong field count");
    Transition t{Vector(d.state_dim), Vector(d.action_dim), Vector(d.state_dim), parse_origin(f.back())};
    std::size_t k = 0;
    auto parse = [&](const std::string& text) {
      char* end = nullptr;
      const double v = std::strtod(text.c_str(), &end);
      if (end == text.c_str() || *end != '\0') {
        throw FormatError(source + ": line " + std::to_string(row) + ": bad number '" + text + "'");
      }
      return v;
    };
    for (int i = 0; i < d.state_dim; ++i) t.s[i] = parse(f[k++]);
    for (int i = 0; i < d.action_dim; ++i) t.a[i] = parse(f[k++]);
    for (int i = 0; i < d.state_dim; ++i) t.s_next[i] = parse(f[k++]);
    if (!t.s.allFinite() || !t.a.allFinite() || !t.s_next.allFinite()) {
      throw FormatError(source + ": line " + std::to_string(row) + ": non-finite value");
    }
    if (d.transitions.empty() || d.transitions.back().s_next != t.s) d.episode_starts.push_back(d.transitions.size());
    d.transitions.push_back(std::move(t));
  }
  return d;
}

inline Dataset load_dataset_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open dataset '" + path + "'");
  return read_dataset_csv(in, path);
}

}  // namespace dmil
