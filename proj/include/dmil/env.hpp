#pragma once

// Linearized balance-robot simulators (a pendulum on a wheeled cart, Euler
// discretized at 200 Hz) and the LQR controllers that generate demonstrations.

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <string>

#include "dmil/nn.hpp"

namespace dmil {

struct PhysicalConstants {
  double cart_mass = 1.0;       // M [kg]
  double pendulum_mass = 0.1;   // m [kg]
  double pendulum_length = 0.5; // l [m]
  double gravity = 9.81;        // g [m/s^2]
  double dt = 0.005;            // 200 Hz
};

enum class ScoreMetric { balance_duration, velocity_tracking };

/// x_{t+1} = A x_t + B u_t + noise, with an axis-aligned termination box.
struct LinearEnv {
  std::string name;
  Matrix A;
  Matrix B;
  PhysicalConstants constants;
  int max_episode_steps = 2000;
  Vector process_noise_std;   // per state dim, zero by default
  Vector termination_bound;   // terminate when |x_i| > bound_i (inf = unused)
  Vector reference;           // operating point the controller regulates to
  Vector init_center;         // d_0: center + U(-w, w) per dim
  Vector init_half_width;
  ScoreMetric metric = ScoreMetric::balance_duration;
  int tracked_dim = -1;       // velocity index for the tracking metric

  int state_dim() const { return static_cast<int>(A.rows()); }
  int action_dim() const { return static_cast<int>(B.cols()); }

  bool terminated(const Vector& x) const {
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (std::abs(x[i]) > termination_bound[i]) return true;
    }
    return false;
  }

  Vector sample_initial_state(Rng& rng) const {
    Vector x = init_center;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (init_half_width[i] > 0.0) x[i] += rng.uniform(-init_half_width[i], init_half_width[i]);
    }
    return x;
  }
};

struct StepResult {
  Vector next_state;
  bool done = false;
};

/// One environment transition. Process noise draws from `rng` only when a
/// nonzero noise std is configured.
inline StepResult step(const LinearEnv& env, const Vector& state, const Vector& action, Rng& rng) {
  require(state.size() == env.state_dim() && action.size() == env.action_dim(), "step: dimension mismatch");
  if (!state.allFinite() || !action.allFinite()) throw NonFiniteError("step: non-finite state or action");
  StepResult r;
  r.next_state = env.A * state + env.B * action;
  if (env.process_noise_std.size() > 0 && (env.process_noise_std.array() != 0.0).any()) {
    for (Eigen::Index i = 0; i < r.next_state.size(); ++i) {
      r.next_state[i] += env.process_noise_std[i] * rng.normal();
    }
  }
  r.done = env.terminated(r.next_state);
  return r;
}

/// Continuous-time linearization about the upright equilibrium, state
/// (theta, theta_dot, p, p_dot) and horizontal force u:
///   theta_ddot = ((M + m) g theta - u) / (M l),   p_ddot = (u - m g theta) / M.
inline std::pair<Matrix, Matrix> cart_pendulum_continuous(const PhysicalConstants& c) {
  const double M = c.cart_mass, m = c.pendulum_mass, l = c.pendulum_length, g = c.gravity;
  Matrix Ac = Matrix::Zero(4, 4);
  Ac(0, 1) = 1.0;
  Ac(1, 0) = (M + m) * g / (M * l);
  Ac(2, 3) = 1.0;
  Ac(3, 0) = -m * g / M;
  Matrix Bc = Matrix::Zero(4, 1);
  Bc(1, 0) = -1.0 / (M * l);
  Bc(3, 0) = 1.0 / M;
  return {Ac, Bc};
}

/// Keep the robot upright in place: state (theta, theta_dot, p, p_dot).
inline LinearEnv make_stand_still_env(const PhysicalConstants& c = {}) {
  auto [Ac, Bc] = cart_pendulum_continuous(c);
  LinearEnv env;
  env.name = "stand-still";
  env.constants = c;
  env.A = Matrix::Identity(4, 4) + c.dt * Ac;
  env.B = c.dt * Bc;
  env.max_episode_steps = 2000;
  env.process_noise_std = Vector::Zero(4);
  const double inf = std::numeric_limits<double>::infinity();
  env.termination_bound = Vector(4);
  env.termination_bound << 0.5, inf, 2.0, inf;
  env.reference = Vector::Zero(4);
  env.init_center = Vector::Zero(4);
  env.init_half_width = Vector(4);
  env.init_half_width << 0.05, 0.05, 0.0, 0.0;
  env.metric = ScoreMetric::balance_duration;
  return env;
}

/// Drive forward at a target velocity: state (theta, theta_dot, p_dot); the
/// position row is dropped since nothing depends on it.
inline LinearEnv make_move_straight_env(double target_velocity = 0.2, const PhysicalConstants& c = {}) {
  auto [Ac, Bc] = cart_pendulum_continuous(c);
  const int keep[3] = {0, 1, 3};
  Matrix A3(3, 3), B3(3, 1);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) A3(i, j) = Ac(keep[i], keep[j]);
    B3(i, 0) = Bc(keep[i], 0);
  }
  LinearEnv env;
  env.name = "move-straight";
  env.constants = c;
  env.A = Matrix::Identity(3, 3) + c.dt * A3;
  env.B = c.dt * B3;
  env.max_episode_steps = 2000;
  env.process_noise_std = Vector::Zero(3);
  const double inf = std::numeric_limits<double>::infinity();
  env.termination_bound = Vector(3);
  env.termination_bound << 0.5, inf, inf;
  env.reference = Vector(3);
  env.reference << 0.0, 0.0, target_velocity;
  env.init_half_width = Vector(3);
  // Starts at rest, so the initial velocity error equals the target.
  env.init_center = Vector::Zero(3);
  env.init_half_width << 0.05, 0.05, 0.0;
  env.metric = ScoreMetric::velocity_tracking;
  env.tracked_dim = 2;
  return env;
}

inline LinearEnv make_env(const std::string& name) {
  if (name == "stand-still") return make_stand_still_env();
  if (name == "move-straight") return make_move_straight_env();
  throw ContractViolation("unknown environment '" + name + "' (expected stand-still or move-straight)");
}

// ---------------------------------------------------------------------------
// LQR
// ---------------------------------------------------------------------------

struct DareSolution {
  Matrix P;  // cost-to-go
  Matrix K;  // u = -K x
  int iterations = 0;
};

inline double max_row_sum(const Matrix& m) { return m.cwiseAbs().rowwise().sum().maxCoeff(); }

/// Fixed-point iteration P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA, starting at Q.
inline DareSolution solve_dare(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R,
                               double tolerance = 1e-10, int max_iterations = 10000) {
  require(A.rows() == A.cols() && B.rows() == A.rows() && Q.rows() == A.rows() && Q.cols() == A.cols() &&
              R.rows() == B.cols() && R.cols() == B.cols(),
          "solve_dare: inconsistent matrix shapes");
  Matrix P = Q;
  for (int it = 1; it <= max_iterations; ++it) {
    const Matrix BtP = B.transpose() * P;
    const Matrix K = (R + BtP * B).ldlt().solve(BtP * A);
    Matrix next = Q + A.transpose() * P * A - A.transpose() * P * B * K;
    next = 0.5 * (next + next.transpose());
    if (!next.allFinite()) throw NonFiniteError("solve_dare: iteration diverged");
    const double change = max_row_sum(next - P);
    P = std::move(next);
    if (change < tolerance) {
      const Matrix BtPn = B.transpose() * P;
      return {P, (R + BtPn * B).ldlt().solve(BtPn * A), it};
    }
  }
  throw std::runtime_error("solve_dare: no convergence after " + std::to_string(max_iterations) + " iterations");
}

inline double dare_residual(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R, const Matrix& P) {
  const Matrix BtP = B.transpose() * P;
  const Matrix rhs = Q + A.transpose() * P * A - A.transpose() * P * B * (R + BtP * B).inverse() * BtP * A;
  return max_row_sum(P - rhs);
}

inline double spectral_radius(const Matrix& M) {
  Eigen::EigenSolver<Matrix> solver(M, false);
  return solver.eigenvalues().cwiseAbs().maxCoeff();
}

/// u = -K (x - reference) + N(0, noise_std^2) per action dim.
struct LqrController {
  Matrix K;
  Vector reference;
  double noise_std = 0.0;

  Vector act(const Vector& state, Rng& rng) const {
    Vector u = -K * (state - reference);
    if (noise_std > 0.0) {
      for (Eigen::Index i = 0; i < u.size(); ++i) u[i] += noise_std * rng.normal();
    }
    return u;
  }
  Vector act(const Vector& state) const { return -K * (state - reference); }
};

/// LQR expert with Q = I and R = 0.1 I.
inline LqrController make_lqr_expert(const LinearEnv& env, double noise_std = 0.0) {
  const Matrix Q = Matrix::Identity(env.state_dim(), env.state_dim());
  const Matrix R = 0.1 * Matrix::Identity(env.action_dim(), env.action_dim());
  const auto sol = solve_dare(env.A, env.B, Q, R);
  return {sol.K, env.reference, noise_std};
}

/// Suboptimal demonstrator: the expert gain scaled by (1 - degradation), plus
/// action noise.
inline LqrController mediocre_controller(const LinearEnv& env, double degradation, double noise_std) {
  require(degradation >= 0.0 && degradation <= 1.0, "mediocre_controller: degradation must lie in [0, 1]");
  LqrController c = make_lqr_expert(env, noise_std);
  c.K *= (1.0 - degradation);
  return c;
}

}  // namespace dmil
