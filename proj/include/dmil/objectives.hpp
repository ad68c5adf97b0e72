#pragma once

// Loss functions of DMIL, D2MIL and the BC-family baselines.
//
// Every expectation is a mean over its own mini-batch. Discriminator values
// entering the policy and dynamics losses are plain numbers, so no gradient
// reaches the discriminators from those losses.

#include <cmath>
#include <functional>
#include <string>
#include <utility>

#include "dmil/batch.hpp"
#include "dmil/models.hpp"

namespace dmil {

struct HyperParams {
  double alpha_pi = 10.0;
  double alpha_f = 10.0;
  double eta = 0.5;
  double beta_o = 0.5;
  double beta_r = 0.5;

  void validate() const {
    require(alpha_pi >= 1.0, "alpha_pi must be >= 1");
    require(alpha_f >= 1.0, "alpha_f must be >= 1");
    require(eta > 0.0 && eta < 1.0, "eta must lie in (0, 1)");
    require(beta_o >= 0.0 && beta_o <= 1.0 && beta_r >= 0.0 && beta_r <= 1.0, "beta_o, beta_r must lie in [0, 1]");
    require(std::abs(beta_o + beta_r - 1.0) < 1e-12, "beta_o + beta_r must equal 1");
  }
};

inline void require_clipped(double d, const char* what) {
  if (!(d >= kDiscMin && d <= kDiscMax)) {
    throw ContractViolation(std::string(what) + ": discriminator value " + std::to_string(d) +
                            " outside [0.1, 0.9]");
  }
}

inline void require_clipped(const Vector& d, const char* what) {
  for (double x : d) require_clipped(x, what);
}

// ---------------------------------------------------------------------------
// Per-sample weights
// ---------------------------------------------------------------------------

struct DmilWeights {
  double expert;   // alpha - 1/d
  double rollout;  // 1/(1-d)
};

inline DmilWeights dmil_weights(double d, double alpha) {
  require_clipped(d, "dmil_weights");
  require(alpha >= 1.0, "dmil_weights: alpha must be >= 1");
  return {alpha - 1.0 / d, 1.0 / (1.0 - d)};
}

struct D2milWeights {
  double expert;
  double suboptimal;  // may be negative
  double rollout;
};

inline D2milWeights d2mil_policy_weights(double d_o, double d_r, const HyperParams& hp) {
  require_clipped(d_o, "d2mil_policy_weights(d_o)");
  require_clipped(d_r, "d2mil_policy_weights(d_r)");
  return {hp.alpha_pi - hp.beta_o * hp.eta / (d_o * (1.0 - d_o)) - hp.beta_r / d_r,
          hp.beta_o / (1.0 - d_o) - hp.beta_r / d_r,
          hp.beta_o / (1.0 - d_o) + hp.beta_r / (1.0 - d_r)};
}

// ---------------------------------------------------------------------------
// Discriminator losses on output values
// ---------------------------------------------------------------------------

/// mean_real[-log d] + mean_fake[-log(1-d)].
inline double rollout_disc_loss(const Vector& d_real, const Vector& d_fake) {
  require(d_real.size() > 0 && d_fake.size() > 0, "rollout_disc_loss: empty batch");
  return -d_real.array().log().mean() - (1.0 - d_fake.array()).log().mean();
}

struct PuTerms {
  double positive = 0.0;   // eta * mean_E[-log d]
  double unlabeled = 0.0;  // mean_U[-log(1-d)] - eta * mean_E[-log(1-d)]
  double total() const { return positive + unlabeled; }
};

/// eta*mean_E[-log d] + mean_U[-log(1-d)] - eta*mean_E[-log(1-d)], without a
/// non-negativity correction on the unlabeled part.
inline PuTerms pu_disc_terms(const Vector& d_expert, const Vector& d_unlabeled, double eta) {
  require(d_expert.size() > 0 && d_unlabeled.size() > 0, "pu_disc_loss: empty batch");
  PuTerms t;
  t.positive = -eta * d_expert.array().log().mean();
  t.unlabeled = -(1.0 - d_unlabeled.array()).log().mean() + eta * (1.0 - d_expert.array()).log().mean();
  return t;
}

inline double pu_disc_loss(const Vector& d_expert, const Vector& d_unlabeled, double eta) {
  return pu_disc_terms(d_expert, d_unlabeled, eta).total();
}

// ---------------------------------------------------------------------------
// Discriminator losses on networks (with gradients)
// ---------------------------------------------------------------------------

inline double rollout_disc_loss(const RolloutDiscriminator& disc, const Matrix& real_features,
                                const Matrix& fake_features, DiscriminatorGradient* grad = nullptr) {
  require(real_features.cols() > 0 && fake_features.cols() > 0, "rollout_disc_loss: empty batch");
  const auto real = disc.evaluate(real_features);
  const auto fake = disc.evaluate(fake_features);
  const double loss = rollout_disc_loss(real.output, fake.output);
  if (grad) {
    const double nr = static_cast<double>(real.output.size());
    const double nf = static_cast<double>(fake.output.size());
    disc.accumulate_output_grad(real, (-1.0 / real.output.array() / nr).matrix(), *grad);
    disc.accumulate_output_grad(fake, (1.0 / (1.0 - fake.output.array()) / nf).matrix(), *grad);
  }
  return loss;
}

inline PuTerms pu_disc_terms(const OptimalityDiscriminator& disc, const Matrix& expert_features,
                             const Matrix& unlabeled_features, double eta, DiscriminatorGradient* grad = nullptr) {
  require(expert_features.cols() > 0 && unlabeled_features.cols() > 0, "pu_disc_loss: empty batch");
  const auto pos = disc.evaluate(expert_features);
  const auto unl = disc.evaluate(unlabeled_features);
  const PuTerms terms = pu_disc_terms(pos.output, unl.output, eta);
  if (grad) {
    const double ne = static_cast<double>(pos.output.size());
    const double nu = static_cast<double>(unl.output.size());
    const auto d = pos.output.array();
    disc.accumulate_output_grad(pos, (eta * (-1.0 / d - 1.0 / (1.0 - d)) / ne).matrix(), *grad);
    disc.accumulate_output_grad(unl, (1.0 / (1.0 - unl.output.array()) / nu).matrix(), *grad);
  }
  return terms;
}

inline double pu_disc_loss(const OptimalityDiscriminator& disc, const Matrix& expert_features,
                           const Matrix& unlabeled_features, double eta, DiscriminatorGradient* grad = nullptr) {
  return pu_disc_terms(disc, expert_features, unlabeled_features, eta, grad).total();
}

// ---------------------------------------------------------------------------
// Weighted likelihood losses for pi and f
// ---------------------------------------------------------------------------

/// mean_i[-w_i * log pi(a_i|s_i)]; an empty batch contributes 0.
inline double weighted_policy_nll(const GaussianPolicy& policy, const Batch& batch, const Vector& weights,
                                  PolicyGradient* grad) {
  if (batch.empty()) return 0.0;
  require(weights.size() == batch.size(), "weighted_policy_nll: weight count mismatch");
  const auto eval = policy.evaluate(batch.states, batch.actions);
  const double n = static_cast<double>(batch.size());
  if (grad) policy.accumulate_log_prob_grad(eval, (-weights / n).eval(), *grad);
  return -(weights.array() * eval.log_prob.array()).sum() / n;
}

inline double weighted_dynamics_nll(const DynamicsModel& model, const Batch& batch, const Vector& weights,
                                    DynamicsGradient* grad) {
  if (batch.empty()) return 0.0;
  require(weights.size() == batch.size(), "weighted_dynamics_nll: weight count mismatch");
  const auto eval = model.evaluate(batch.states, batch.actions, batch.next_states);
  const double n = static_cast<double>(batch.size());
  if (grad) model.accumulate_log_prob_grad(eval, (-weights / n).eval(), *grad);
  return -(weights.array() * eval.log_prob.array()).sum() / n;
}

/// Behavior cloning: mean of -log pi(a|s).
inline double bc_loss(const GaussianPolicy& policy, const Batch& batch, PolicyGradient* grad = nullptr) {
  require(!batch.empty(), "bc_loss: empty batch");
  return weighted_policy_nll(policy, batch, Vector::Ones(batch.size()), grad);
}

/// Maximum-likelihood dynamics objective: mean of -log f(s'|s,a).
inline double dynamics_nll_loss(const DynamicsModel& model, const Batch& batch, DynamicsGradient* grad = nullptr) {
  require(!batch.empty(), "dynamics_nll_loss: empty batch");
  return weighted_dynamics_nll(model, batch, Vector::Ones(batch.size()), grad);
}

/// Pooled mean of -log pi over the union of an expert and a rollout batch.
inline double bc_finetune_loss(const GaussianPolicy& policy, const Batch& expert, const Batch& rollout,
                               PolicyGradient* grad = nullptr) {
  const Batch all = concat(expert, rollout);
  require(!all.empty(), "bc_finetune_loss: empty batch");
  return weighted_policy_nll(policy, all, Vector::Ones(all.size()), grad);
}

using DmilWeightFn = std::function<DmilWeights(double, double)>;

inline std::pair<Vector, Vector> dmil_weight_vectors(const Vector& d_expert, const Vector& d_rollout, double alpha,
                                                     const DmilWeightFn& weight_fn) {
  Vector we(d_expert.size()), wr(d_rollout.size());
  for (Eigen::Index i = 0; i < d_expert.size(); ++i) we[i] = weight_fn(d_expert[i], alpha).expert;
  for (Eigen::Index i = 0; i < d_rollout.size(); ++i) wr[i] = weight_fn(d_rollout[i], alpha).rollout;
  return {we, wr};
}

/// mean_E[-(alpha - 1/d) log pi] + mean_R[-(1/(1-d)) log pi]. The rollout term
/// is skipped while the rollout batch is empty.
inline double dmil_policy_loss(const GaussianPolicy& policy, const Batch& expert, const Batch& rollout,
                               const Vector& d_expert, const Vector& d_rollout, double alpha_pi,
                               PolicyGradient* grad = nullptr, const DmilWeightFn& weight_fn = dmil_weights) {
  require(!expert.empty(), "dmil_policy_loss: empty expert batch");
  require(d_expert.size() == expert.size() && d_rollout.size() == rollout.size(),
          "dmil_policy_loss: d-value count mismatch");
  const auto [we, wr] = dmil_weight_vectors(d_expert, d_rollout, alpha_pi, weight_fn);
  return weighted_policy_nll(policy, expert, we, grad) + weighted_policy_nll(policy, rollout, wr, grad);
}

/// Same structure as dmil_policy_loss with log f in place of log pi.
inline double dmil_dynamics_loss(const DynamicsModel& model, const Batch& expert, const Batch& rollout,
                                 const Vector& d_expert, const Vector& d_rollout, double alpha_f,
                                 DynamicsGradient* grad = nullptr, const DmilWeightFn& weight_fn = dmil_weights) {
  require(!expert.empty(), "dmil_dynamics_loss: empty expert batch");
  require(d_expert.size() == expert.size() && d_rollout.size() == rollout.size(),
          "dmil_dynamics_loss: d-value count mismatch");
  const auto [we, wr] = dmil_weight_vectors(d_expert, d_rollout, alpha_f, weight_fn);
  return weighted_dynamics_nll(model, expert, we, grad) + weighted_dynamics_nll(model, rollout, wr, grad);
}

/// Discriminator values attached to one batch.
struct DValues {
  Vector d_r;
  Vector d_o;
};

/// D2MIL policy objective: three per-set means of -coefficient * log pi with the
/// coefficients of d2mil_policy_weights. Empty suboptimal or rollout batches
/// drop their term.
inline double d2mil_policy_loss(const GaussianPolicy& policy, const Batch& expert, const Batch& suboptimal,
                                const Batch& rollout, const DValues& d_expert, const DValues& d_suboptimal,
                                const DValues& d_rollout, const HyperParams& hp, PolicyGradient* grad = nullptr) {
  require(!expert.empty(), "d2mil_policy_loss: empty expert batch");
  auto coefficients = [&](const Batch& b, const DValues& d, auto pick) {
    require(d.d_r.size() == b.size() && d.d_o.size() == b.size(), "d2mil_policy_loss: d-value count mismatch");
    Vector w(b.size());
    for (Eigen::Index i = 0; i < b.size(); ++i) w[i] = pick(d2mil_policy_weights(d.d_o[i], d.d_r[i], hp));
    return w;
  };
  const Vector we = coefficients(expert, d_expert, [](const D2milWeights& w) { return w.expert; });
  const Vector wo = coefficients(suboptimal, d_suboptimal, [](const D2milWeights& w) { return w.suboptimal; });
  const Vector wr = coefficients(rollout, d_rollout, [](const D2milWeights& w) { return w.rollout; });
  return weighted_policy_nll(policy, expert, we, grad) + weighted_policy_nll(policy, suboptimal, wo, grad) +
         weighted_policy_nll(policy, rollout, wr, grad);
}

/// D2MIL dynamics objective: the DMIL form with D_e ∪ D_o as the real side and
/// d = d_r.
inline double d2mil_dynamics_loss(const DynamicsModel& model, const Batch& real, const Batch& rollout,
                                  const Vector& d_r_real, const Vector& d_r_rollout, double alpha_f,
                                  DynamicsGradient* grad = nullptr) {
  return dmil_dynamics_loss(model, real, rollout, d_r_real, d_r_rollout, alpha_f, grad);
}

// ---------------------------------------------------------------------------
// Training-step objectives over the whole model set. These are what the
// trainer differentiates; gradients are reported for every model so the
// stop-gradient contract can be checked directly.
// ---------------------------------------------------------------------------

struct ObjectiveValue {
  double value = 0.0;
  ModelSetGradient grad;
};

/// d_r values for a batch under the current models (values only).
inline Vector rollout_disc_values(const ModelSet& m, const Batch& b) {
  if (b.empty()) return Vector(0);
  return m.disc_r.output(rollout_features(m, b));
}

inline Vector optimality_disc_values(const ModelSet& m, const Batch& b) {
  if (b.empty()) return Vector(0);
  return m.disc_o.output(optimality_features(m, b));
}

inline ObjectiveValue dmil_policy_objective(const ModelSet& m, const Batch& expert, const Batch& rollout,
                                            double alpha_pi, const DmilWeightFn& weight_fn = dmil_weights) {
  ObjectiveValue out{0.0, ModelSetGradient::zeros_like(m)};
  const Vector de = rollout_disc_values(m, expert);
  const Vector dr = rollout_disc_values(m, rollout);
  out.value = dmil_policy_loss(m.policy, expert, rollout, de, dr, alpha_pi, &out.grad.policy, weight_fn);
  return out;
}

inline ObjectiveValue dmil_dynamics_objective(const ModelSet& m, const Batch& expert, const Batch& rollout,
                                              double alpha_f, const DmilWeightFn& weight_fn = dmil_weights) {
  ObjectiveValue out{0.0, ModelSetGradient::zeros_like(m)};
  const Vector de = rollout_disc_values(m, expert);
  const Vector dr = rollout_disc_values(m, rollout);
  out.value = dmil_dynamics_loss(m.dynamics, expert, rollout, de, dr, alpha_f, &out.grad.dynamics, weight_fn);
  return out;
}

inline ObjectiveValue d2mil_policy_objective(const ModelSet& m, const Batch& expert, const Batch& suboptimal,
                                             const Batch& rollout, const HyperParams& hp) {
  ObjectiveValue out{0.0, ModelSetGradient::zeros_like(m)};
  auto dv = [&](const Batch& b) { return DValues{rollout_disc_values(m, b), optimality_disc_values(m, b)}; };
  out.value = d2mil_policy_loss(m.policy, expert, suboptimal, rollout, dv(expert), dv(suboptimal), dv(rollout), hp,
                                &out.grad.policy);
  return out;
}

inline ObjectiveValue d2mil_dynamics_objective(const ModelSet& m, const Batch& expert, const Batch& suboptimal,
                                               const Batch& rollout, const HyperParams& hp) {
  ObjectiveValue out{0.0, ModelSetGradient::zeros_like(m)};
  const Batch real = concat(expert, suboptimal);
  out.value = d2mil_dynamics_loss(m.dynamics, real, rollout, rollout_disc_values(m, real),
                                  rollout_disc_values(m, rollout), hp.alpha_f, &out.grad.dynamics);
  return out;
}

}  // namespace dmil
