#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "dmil/nn.hpp"

namespace dmil {

enum class Origin { expert, suboptimal, rollout };

inline std::string_view to_string(Origin o) {
  switch (o) {
    case Origin::expert: return "expert";
    case Origin::suboptimal: return "suboptimal";
    case Origin::rollout: return "rollout";
  }
  return "unknown";
}

inline Origin parse_origin(std::string_view text) {
  if (text == "expert") return Origin::expert;
  if (text == "suboptimal") return Origin::suboptimal;
  if (text == "rollout") return Origin::rollout;
  throw FormatError("unknown transition origin '" + std::string(text) + "'");
}

/// Column-per-sample view of a set of transitions.
struct Batch {
  Matrix states;
  Matrix actions;
  Matrix next_states;
  std::vector<Origin> origins;

  Eigen::Index size() const { return states.cols(); }
  bool empty() const { return states.cols() == 0; }

  static Batch empty_like(int state_dim, int action_dim) {
    return {Matrix(state_dim, 0), Matrix(action_dim, 0), Matrix(state_dim, 0), {}};
  }
};

/// Column-wise concatenation; either side may be empty.
inline Batch concat(const Batch& a, const Batch& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  require(a.states.rows() == b.states.rows() && a.actions.rows() == b.actions.rows(), "concat: batch widths differ");
  Batch out;
  out.states.resize(a.states.rows(), a.size() + b.size());
  out.states << a.states, b.states;
  out.actions.resize(a.actions.rows(), a.size() + b.size());
  out.actions << a.actions, b.actions;
  out.next_states.resize(a.next_states.rows(), a.size() + b.size());
  out.next_states << a.next_states, b.next_states;
  out.origins = a.origins;
  out.origins.insert(out.origins.end(), b.origins.begin(), b.origins.end());
  return out;
}

}  // namespace dmil
