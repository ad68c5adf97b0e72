#pragma once

// Short branched model rollouts from dataset states and the FIFO buffer D_r.

#include <cstddef>
#include <vector>

#include "dmil/dataset.hpp"
#include "dmil/models.hpp"

namespace dmil {

enum class StartSource { expert, expert_and_suboptimal };

struct RolloutConfig {
  int horizon = 5;
  int branches = 256;  // 0 disables rollout generation
  StartSource start_source = StartSource::expert;
  std::size_t capacity = 50000;
  double guard_factor = 10.0;

  void validate() const {
    require(horizon >= 1, "rollout horizon must be >= 1");
    require(branches >= 0, "rollout branches must be >= 0");
    require(capacity > 0, "rollout buffer capacity must be positive");
  }
};

struct RolloutResult {
  std::vector<Transition> transitions;  // emitted step-major: all branches at h=0, then h=1, ...
  std::vector<std::size_t> branch;      // branch index of each transition
  std::size_t truncated = 0;            // branches stopped by the divergence guard
};

/// For each start state (one column each) iterate `horizon` times:
/// a ~ pi(.|s), s' ~ f(.|s,a), emit (s, a, s'), s <- s'. A branch stops when s'
/// is non-finite or leaves the box |x_i| <= guard_factor * max_abs[i].
inline RolloutResult generate_rollouts(const GaussianPolicy& policy, const DynamicsModel& dynamics,
                                       const Matrix& start_states, const RolloutConfig& config,
                                       const Vector& max_abs, Rng& rng) {
  config.validate();
  require(start_states.rows() == policy.state_dim(), "generate_rollouts: start state dimension mismatch");
  require(max_abs.size() == start_states.rows(), "generate_rollouts: guard bound dimension mismatch");
  const Vector bound = (config.guard_factor * max_abs).cwiseMax(1e-12);

  RolloutResult out;
  std::vector<std::size_t> active(static_cast<std::size_t>(start_states.cols()));
  for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;
  Matrix states = start_states;

  for (int h = 0; h < config.horizon && !active.empty(); ++h) {
    const Matrix actions = policy.sample(states, rng);
    const Matrix next = dynamics.sample(states, actions, rng);
    std::vector<std::size_t> keep;
    for (Eigen::Index j = 0; j < states.cols(); ++j) {
      const auto col = next.col(j);
      const bool ok = col.allFinite() && actions.col(j).allFinite() && (col.cwiseAbs().array() <= bound.array()).all();
      if (!ok) {
        ++out.truncated;
        continue;
      }
      out.transitions.push_back({states.col(j), actions.col(j), col, Origin::rollout});
      out.branch.push_back(active[static_cast<std::size_t>(j)]);
      keep.push_back(static_cast<std::size_t>(j));
    }
    Matrix survivors(states.rows(), static_cast<Eigen::Index>(keep.size()));
    std::vector<std::size_t> still_active;
    for (std::size_t k = 0; k < keep.size(); ++k) {
      survivors.col(static_cast<Eigen::Index>(k)) = next.col(static_cast<Eigen::Index>(keep[k]));
      still_active.push_back(active[keep[k]]);
    }
    states = std::move(survivors);
    active = std::move(still_active);
  }
  return out;
}

/// Bounded FIFO of rollout transitions.
class RolloutBuffer {
 public:
  explicit RolloutBuffer(std::size_t capacity = 50000) : capacity_(capacity) {
    require(capacity > 0, "rollout buffer capacity must be positive");
  }

  std::size_t size() const { return data_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return data_.empty(); }

  /// Appends in order, evicting the oldest entries beyond capacity. Every
  /// stored transition is tagged origin=rollout.
  void push(const std::vector<Transition>& transitions) {
    for (const auto& t : transitions) {
      Transition copy = t;
      copy.origin = Origin::rollout;
      if (data_.size() < capacity_) {
        data_.push_back(std::move(copy));
      } else {
        data_[head_] = std::move(copy);
        head_ = (head_ + 1) % capacity_;
      }
    }
  }

  /// i-th oldest surviving entry.
  const Transition& at(std::size_t i) const { return data_.at((head_ + i) % data_.size()); }

  std::vector<Transition> snapshot() const {
    std::vector<Transition> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.push_back(at(i));
    return out;
  }

  /// Uniform with replacement. An empty buffer yields an empty batch, which
  /// the objectives treat as "rollout terms skipped this step".
  Batch sample_batch(std::size_t n, int state_dim, int action_dim, Rng& rng) const {
    Batch b{Matrix(state_dim, 0), Matrix(action_dim, 0), Matrix(state_dim, 0), {}};
    if (empty() || n == 0) return b;
    b.states.resize(state_dim, static_cast<Eigen::Index>(n));
    b.actions.resize(action_dim, static_cast<Eigen::Index>(n));
    b.next_states.resize(state_dim, static_cast<Eigen::Index>(n));
    b.origins.assign(n, Origin::rollout);
    for (std::size_t j = 0; j < n; ++j) {
      const auto& t = data_[rng.index(data_.size())];
      const auto c = static_cast<Eigen::Index>(j);
      b.states.col(c) = t.s;
      b.actions.col(c) = t.a;
      b.next_states.col(c) = t.s_next;
    }
    return b;
  }

  Dataset to_dataset(int state_dim, int action_dim) const {
    Dataset d;
    d.state_dim = state_dim;
    d.action_dim = action_dim;
    d.transitions = snapshot();
    if (!d.transitions.empty()) d.episode_starts.push_back(0);
    d.meta = {{"source", "rollout-buffer"}, {"size", size()}};
    return d;
  }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;  // index of the oldest entry once full
  std::vector<Transition> data_;
};

}  // namespace dmil
