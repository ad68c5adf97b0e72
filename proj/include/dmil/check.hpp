#pragma once

// Self-verification suite run by `dmil_cli check`: gradient checks, the
// stop-gradient contract, discriminator clamping, closed-form values,
// reductions between objectives and the Riccati solver.

#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "dmil/env.hpp"
#include "dmil/objectives.hpp"

namespace dmil {

struct PropertyResult {
  std::string name;
  bool passed = false;
  double metric = 0.0;     // max error (or count) observed
  double threshold = 0.0;  // pass bound for the metric
  std::string detail;
};

struct CheckOptions {
  std::uint64_t seed = 1;
  // Mutation fixture: replaces the DMIL weight function with one whose expert
  // weight has the wrong sign on the 1/d term.
  bool inject_weight_sign_error = false;
};

inline DmilWeights faulty_dmil_weights(double d, double alpha) { return {alpha + 1.0 / d, 1.0 / (1.0 - d)}; }

/// Small random model family and batches for the property checks.
struct CheckFixture {
  static constexpr int kStateDim = 3;
  static constexpr int kActionDim = 2;
  static constexpr int kBatch = 16;

  ModelSet models;
  Batch expert, suboptimal, rollout;

  explicit CheckFixture(std::uint64_t seed, int width = 8) {
    Rng rng = Rng::stream(seed, "check-fixture");
    const std::vector<int> hidden{width, width};
    models.policy = GaussianPolicy::create(kStateDim, kActionDim, hidden, rng);
    models.dynamics = DynamicsModel::create(kStateDim, kActionDim, hidden, rng);
    models.disc_r = RolloutDiscriminator::create(kStateDim, kActionDim, hidden, rng);
    models.disc_o = OptimalityDiscriminator::create(kStateDim, kActionDim, hidden, rng);
    for (Eigen::Index i = 0; i < models.policy.log_std().size(); ++i) models.policy.log_std()[i] = rng.uniform(-0.5, 0.5);
    for (DenseNet* net : {&models.policy.net(), &models.dynamics.net(), &models.disc_r.net(), &models.disc_o.net()}) {
      for (auto& layer : net->layers()) {
        for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = rng.uniform(-0.1, 0.1);
      }
    }
    // Keep discriminator outputs inside the clip band so every sample
    // contributes a gradient.
    for (DenseNet* net : {&models.disc_r.net(), &models.disc_o.net()}) {
      auto& w = net->layers().back().weight;
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-0.3, 0.3);
    }
    Normalizer feature_scale;
    feature_scale.shift = Vector::Zero(models.disc_r.feature_dim());
    feature_scale.scale = Vector::Constant(models.disc_r.feature_dim(), 1.0);
    models.disc_r.input_normalizer() = feature_scale;
    feature_scale.shift = Vector::Zero(models.disc_o.feature_dim());
    feature_scale.scale = Vector::Constant(models.disc_o.feature_dim(), 1.0);
    models.disc_o.input_normalizer() = feature_scale;

    expert = random_batch(rng, Origin::expert);
    suboptimal = random_batch(rng, Origin::suboptimal);
    rollout = random_batch(rng, Origin::rollout);
  }

  static Batch random_batch(Rng& rng, Origin origin) {
    Batch b{Matrix(kStateDim, kBatch), Matrix(kActionDim, kBatch), Matrix(kStateDim, kBatch),
            std::vector<Origin>(kBatch, origin)};
    for (Eigen::Index j = 0; j < kBatch; ++j) {
      for (int i = 0; i < kStateDim; ++i) b.states(i, j) = rng.normal();
      for (int i = 0; i < kActionDim; ++i) b.actions(i, j) = rng.normal();
      for (int i = 0; i < kStateDim; ++i) b.next_states(i, j) = b.states(i, j) + 0.3 * rng.normal();
    }
    return b;
  }

  /// Random discriminator values inside the clip band.
  static Vector random_d(Rng& rng, Eigen::Index n) {
    Vector d(n);
    for (Eigen::Index i = 0; i < n; ++i) d[i] = rng.uniform(kDiscMin, kDiscMax);
    return d;
  }
};

namespace detail {

inline std::string sci(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", x);
  return buf;
}

inline PropertyResult gradient_property(const std::string& name, const GradientCheckReport& r, double tol) {
  return {name, r.max_relative_error < tol, r.max_relative_error, tol,
          "max relative error " + sci(r.max_relative_error) + " over " + std::to_string(r.checked) +
              " entries (worst " + r.worst_block + "[" + std::to_string(r.worst_index) + "])"};
}

inline PropertyResult bound_property(const std::string& name, double error, double tol, const std::string& what) {
  return {name, error < tol, error, tol, what + ": max abs error " + sci(error)};
}

}  // namespace detail

/// Finite-difference checks for every loss, at width 8 and batch 16.
inline std::vector<PropertyResult> gradient_checks(std::uint64_t seed, double tol = 1e-4) {
  CheckFixture fx(seed);
  auto& m = fx.models;
  Rng rng = Rng::stream(seed, "check-d-values");
  const HyperParams hp;
  std::vector<PropertyResult> out;

  {
    PolicyGradient g = m.policy.zero_gradient();
    bc_loss(m.policy, fx.expert, &g);
    out.push_back(detail::gradient_property(
        "grad_bc_loss", finite_difference_check([&] { return bc_loss(m.policy, fx.expert); }, m.policy.blocks(),
                                                dmil::as_const(g.blocks())), tol));
  }
  {
    DynamicsGradient g = m.dynamics.zero_gradient();
    dynamics_nll_loss(m.dynamics, fx.expert, &g);
    out.push_back(detail::gradient_property(
        "grad_dynamics_nll",
        finite_difference_check([&] { return dynamics_nll_loss(m.dynamics, fx.expert); }, m.dynamics.blocks(),
                                dmil::as_const(g.blocks())), tol));
  }
  {
    const Matrix real = rollout_features(m, fx.expert), fake = rollout_features(m, fx.rollout);
    DiscriminatorGradient g = m.disc_r.zero_gradient();
    rollout_disc_loss(m.disc_r, real, fake, &g);
    out.push_back(detail::gradient_property(
        "grad_rollout_disc_loss",
        finite_difference_check([&] { return rollout_disc_loss(m.disc_r, real, fake); }, m.disc_r.blocks(),
                                dmil::as_const(g.blocks())), tol));
  }
  {
    const Matrix pos = optimality_features(m, fx.expert);
    const Matrix unl = optimality_features(m, concat(fx.suboptimal, fx.rollout));
    DiscriminatorGradient g = m.disc_o.zero_gradient();
    pu_disc_loss(m.disc_o, pos, unl, hp.eta, &g);
    out.push_back(detail::gradient_property(
        "grad_pu_disc_loss",
        finite_difference_check([&] { return pu_disc_loss(m.disc_o, pos, unl, hp.eta); }, m.disc_o.blocks(),
                                dmil::as_const(g.blocks())), tol));
  }
  const Vector de = CheckFixture::random_d(rng, fx.expert.size());
  const Vector dr = CheckFixture::random_d(rng, fx.rollout.size());
  {
    PolicyGradient g = m.policy.zero_gradient();
    dmil_policy_loss(m.policy, fx.expert, fx.rollout, de, dr, hp.alpha_pi, &g);
    out.push_back(detail::gradient_property(
        "grad_dmil_policy_loss",
        finite_difference_check(
            [&] { return dmil_policy_loss(m.policy, fx.expert, fx.rollout, de, dr, hp.alpha_pi); },
            m.policy.blocks(), dmil::as_const(g.blocks())), tol));
  }
  {
    DynamicsGradient g = m.dynamics.zero_gradient();
    dmil_dynamics_loss(m.dynamics, fx.expert, fx.rollout, de, dr, hp.alpha_f, &g);
    out.push_back(detail::gradient_property(
        "grad_dmil_dynamics_loss",
        finite_difference_check(
            [&] { return dmil_dynamics_loss(m.dynamics, fx.expert, fx.rollout, de, dr, hp.alpha_f); },
            m.dynamics.blocks(), dmil::as_const(g.blocks())), tol));
  }
  const DValues dv_e{de, CheckFixture::random_d(rng, fx.expert.size())};
  const DValues dv_o{CheckFixture::random_d(rng, fx.suboptimal.size()), CheckFixture::random_d(rng, fx.suboptimal.size())};
  const DValues dv_r{dr, CheckFixture::random_d(rng, fx.rollout.size())};
  {
    PolicyGradient g = m.policy.zero_gradient();
    d2mil_policy_loss(m.policy, fx.expert, fx.suboptimal, fx.rollout, dv_e, dv_o, dv_r, hp, &g);
    out.push_back(detail::gradient_property(
        "grad_d2mil_policy_loss",
        finite_difference_check(
            [&] { return d2mil_policy_loss(m.policy, fx.expert, fx.suboptimal, fx.rollout, dv_e, dv_o, dv_r, hp); },
            m.policy.blocks(), dmil::as_const(g.blocks())), tol));
  }
  {
    const Batch real = concat(fx.expert, fx.suboptimal);
    Vector d_real(real.size());
    d_real << de, dv_o.d_r;
    DynamicsGradient g = m.dynamics.zero_gradient();
    d2mil_dynamics_loss(m.dynamics, real, fx.rollout, d_real, dr, hp.alpha_f, &g);
    out.push_back(detail::gradient_property(
        "grad_d2mil_dynamics_loss",
        finite_difference_check(
            [&] { return d2mil_dynamics_loss(m.dynamics, real, fx.rollout, d_real, dr, hp.alpha_f); },
            m.dynamics.blocks(), dmil::as_const(g.blocks())), tol));
  }
  return out;
}

/// pi and f objectives must leave every discriminator gradient exactly zero.
inline PropertyResult stop_gradient_check(std::uint64_t seed) {
  CheckFixture fx(seed);
  const HyperParams hp;
  const auto& m = fx.models;
  const std::vector<std::pair<std::string, ObjectiveValue>> objectives{
      {"dmil_pi", dmil_policy_objective(m, fx.expert, fx.rollout, hp.alpha_pi)},
      {"dmil_f", dmil_dynamics_objective(m, fx.expert, fx.rollout, hp.alpha_f)},
      {"d2mil_pi", d2mil_policy_objective(m, fx.expert, fx.suboptimal, fx.rollout, hp)},
      {"d2mil_f", d2mil_dynamics_objective(m, fx.expert, fx.suboptimal, fx.rollout, hp)}};
  std::string leaking;
  double nonzero = 0.0;
  for (const auto& [name, obj] : objectives) {
    if (!obj.grad.disc_r.is_zero() || !obj.grad.disc_o.is_zero()) {
      leaking += (leaking.empty() ? "" : ",") + name;
      nonzero += 1.0;
    }
    if (obj.grad.policy.is_zero() && obj.grad.dynamics.is_zero()) {
      leaking += (leaking.empty() ? "" : ",") + name + "(no model gradient)";
      nonzero += 1.0;
    }
  }
  return {"stop_gradient", nonzero == 0.0, nonzero, 0.5,
          leaking.empty() ? "discriminator gradients exactly zero for 4 objectives" : "leaking: " + leaking};
}

/// Random discriminators with saturating weights and inputs; every output
/// must lie in [0.1, 0.9]. Also checks alpha - 1/d >= 0 across the band.
inline std::vector<PropertyResult> clamp_checks(std::uint64_t seed, int evaluations = 100000,
                                                const DmilWeightFn& weights = dmil_weights) {
  Rng rng = Rng::stream(seed, "check-clamp");
  const int per_net = 1000;
  std::size_t outside = 0, evaluated = 0;
  double lo = 1.0, hi = 0.0;
  while (static_cast<int>(evaluated) < evaluations) {
    auto d = RolloutDiscriminator::create(3, 2, {8, 8}, rng);
    const double gain = rng.uniform(0.1, 20.0);
    auto& w = d.net().layers().back().weight;
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = gain * rng.uniform(-1.0, 1.0);
    const int n = std::min(per_net, evaluations - static_cast<int>(evaluated));
    Matrix features(d.feature_dim(), n);
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index i = 0; i < features.rows(); ++i) features(i, j) = 10.0 * rng.normal();
    }
    const Vector out = d.output(features);
    for (Eigen::Index j = 0; j < out.size(); ++j) {
      lo = std::min(lo, out[j]);
      hi = std::max(hi, out[j]);
      if (!(out[j] >= kDiscMin && out[j] <= kDiscMax)) ++outside;
    }
    evaluated += static_cast<std::size_t>(n);
  }
  std::vector<PropertyResult> results;
  results.push_back({"discriminator_clamp", outside == 0, static_cast<double>(outside), 0.5,
                     std::to_string(evaluated) + " evaluations in [" + detail::sci(lo) + ", " +
                         detail::sci(hi) + "]"});

  double min_weight = std::numeric_limits<double>::infinity();
  const int grid = 10001;
  for (int k = 0; k < grid; ++k) {
    const double dv = kDiscMin + (kDiscMax - kDiscMin) * k / (grid - 1);
    min_weight = std::min(min_weight, weights(dv, 10.0).expert);
  }
  results.push_back({"dmil_expert_weight_nonnegative", min_weight >= 0.0, min_weight, 0.0,
                     "min alpha - 1/d over the clip band at alpha=10: " + detail::sci(min_weight)});
  return results;
}

/// Closed-form values at d = 0.5.
inline std::vector<PropertyResult> spot_value_checks(const DmilWeightFn& weights = dmil_weights) {
  constexpr double tol = 1e-12;
  const HyperParams hp;
  std::vector<PropertyResult> out;
  const DmilWeights w = weights(0.5, 10.0);
  out.push_back(detail::bound_property("dmil_weights_spot", std::max(std::abs(w.expert - 8.0), std::abs(w.rollout - 2.0)),
                                       tol, "dmil_weights(0.5, 10) vs (8, 2)"));
  const D2milWeights w2 = d2mil_policy_weights(0.5, 0.5, hp);
  out.push_back(detail::bound_property(
      "d2mil_weights_spot",
      std::max({std::abs(w2.expert - 8.0), std::abs(w2.suboptimal), std::abs(w2.rollout - 2.0)}), tol,
      "d2mil coefficients at d_o=d_r=0.5 vs (8, 0, 2)"));
  const Vector half = Vector::Constant(16, 0.5);
  out.push_back(detail::bound_property("pu_loss_spot", std::abs(pu_disc_loss(half, half, 0.5) - std::numbers::ln2), tol,
                                       "PU loss at all-0.5 outputs vs log 2"));
  out.push_back(detail::bound_property("rollout_disc_loss_spot",
                                       std::abs(rollout_disc_loss(half, half) - 2.0 * std::numbers::ln2), tol,
                                       "discriminator loss at all-0.5 outputs vs 2 log 2"));
  return out;
}

/// D2MIL with beta_o = 0 and no suboptimal data equals DMIL; BC+d without
/// rollouts equals BC.
inline std::vector<PropertyResult> reduction_checks(std::uint64_t seed, const DmilWeightFn& weights = dmil_weights) {
  constexpr double tol = 1e-12;
  CheckFixture fx(seed);
  const auto& m = fx.models;
  Rng rng = Rng::stream(seed, "check-reduction");
  HyperParams hp;
  hp.beta_o = 0.0;
  hp.beta_r = 1.0;
  const Batch none = Batch::empty_like(CheckFixture::kStateDim, CheckFixture::kActionDim);
  const Vector de = CheckFixture::random_d(rng, fx.expert.size());
  const Vector dr = CheckFixture::random_d(rng, fx.rollout.size());
  const DValues dv_e{de, CheckFixture::random_d(rng, fx.expert.size())};
  const DValues dv_r{dr, CheckFixture::random_d(rng, fx.rollout.size())};
  const DValues dv_none{Vector(0), Vector(0)};

  PolicyGradient g_dmil = m.policy.zero_gradient(), g_d2mil = m.policy.zero_gradient();
  const double l_dmil = dmil_policy_loss(m.policy, fx.expert, fx.rollout, de, dr, hp.alpha_pi, &g_dmil, weights);
  const double l_d2mil = d2mil_policy_loss(m.policy, fx.expert, none, fx.rollout, dv_e, dv_none, dv_r, hp, &g_d2mil);
  double pi_err = std::abs(l_dmil - l_d2mil);
  {
    auto a = g_dmil.blocks(), b = g_d2mil.blocks();
    for (std::size_t k = 0; k < a.size(); ++k) {
      for (std::size_t i = 0; i < a[k].values.size(); ++i) pi_err = std::max(pi_err, std::abs(a[k].values[i] - b[k].values[i]));
    }
  }
  const double f_err =
      std::abs(dmil_dynamics_loss(m.dynamics, fx.expert, fx.rollout, de, dr, hp.alpha_f, nullptr, weights) -
               d2mil_dynamics_loss(m.dynamics, concat(fx.expert, none), fx.rollout, de, dr, hp.alpha_f));

  PolicyGradient g_bc = m.policy.zero_gradient(), g_bcd = m.policy.zero_gradient();
  double bc_err = std::abs(bc_loss(m.policy, fx.expert, &g_bc) - bc_finetune_loss(m.policy, fx.expert, none, &g_bcd));
  {
    auto a = g_bc.blocks(), b = g_bcd.blocks();
    for (std::size_t k = 0; k < a.size(); ++k) {
      for (std::size_t i = 0; i < a[k].values.size(); ++i) bc_err = std::max(bc_err, std::abs(a[k].values[i] - b[k].values[i]));
    }
  }
  return {detail::bound_property("reduction_d2mil_policy_to_dmil", pi_err, tol, "beta_o=0, empty D_o: loss and gradient"),
          detail::bound_property("reduction_d2mil_dynamics_to_dmil", f_err, tol, "beta_o=0, empty D_o: loss"),
          {"reduction_bc_d_to_bc", bc_err == 0.0, bc_err, 0.0, "empty D_r: loss and gradient bitwise equal"}};
}

inline std::vector<PropertyResult> dare_checks() {
  std::vector<PropertyResult> out;
  const Matrix one = Matrix::Identity(1, 1);
  const auto scalar = solve_dare(one, one, one, one);
  const double golden = (1.0 + std::sqrt(5.0)) / 2.0;
  out.push_back(detail::bound_property("dare_scalar_golden_ratio",
                                       std::max(std::abs(scalar.P(0, 0) - golden), std::abs(scalar.K(0, 0) - golden / (1.0 + golden))),
                                       1e-9, "A=B=Q=R=1 vs P=(1+sqrt5)/2, K=P/(1+P)"));
  const auto env = make_stand_still_env();
  const Matrix Q = Matrix::Identity(4, 4), R = 0.1 * Matrix::Identity(1, 1);
  const auto sol = solve_dare(env.A, env.B, Q, R);
  out.push_back(detail::bound_property("dare_residual_stand_still", dare_residual(env.A, env.B, Q, R, sol.P), 1e-8,
                                       "Riccati residual (inf-norm)"));
  const double rho = spectral_radius(env.A - env.B * sol.K);
  out.push_back({"lqr_closed_loop_stable", rho < 1.0, rho, 1.0, "spectral radius of A - BK: " + detail::sci(rho)});
  return out;
}

inline std::vector<PropertyResult> run_property_checks(const CheckOptions& opt = {}) {
  const DmilWeightFn weights = opt.inject_weight_sign_error ? DmilWeightFn(faulty_dmil_weights) : DmilWeightFn(dmil_weights);
  std::vector<PropertyResult> all = gradient_checks(opt.seed);
  all.push_back(stop_gradient_check(opt.seed));
  for (auto& r : clamp_checks(opt.seed, 100000, weights)) all.push_back(std::move(r));
  for (auto& r : spot_value_checks(weights)) all.push_back(std::move(r));
  for (auto& r : reduction_checks(opt.seed, weights)) all.push_back(std::move(r));
  for (auto& r : dare_checks()) all.push_back(std::move(r));
  return all;
}

}  // namespace dmil
