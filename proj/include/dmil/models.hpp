#pragma once

// Gaussian policy, probabilistic dynamics model and the two clipped
// discriminators. Batched evaluation takes column-per-sample matrices.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "dmil/batch.hpp"
#include "dmil/nn.hpp"

namespace dmil {

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2*pi)

/// Fixed per-feature affine map x -> (x - shift) / scale applied to network
/// inputs. An empty normalizer is the identity.
struct Normalizer {
  Vector shift;
  Vector scale;

  bool identity() const { return shift.size() == 0; }

  Matrix apply(const Matrix& x) const {
    if (identity()) return x;
    require(shift.size() == x.rows() && scale.size() == x.rows(), "normalizer width does not match input");
    return (x.colwise() - shift).array().colwise() / scale.array();
  }

  /// Mean/std of the columns of `data`; stds below `floor` are raised to it.
  static Normalizer fit(const Matrix& data, double floor = 1e-6) {
    Normalizer n;
    n.shift = data.rowwise().mean();
    Matrix centered = data.colwise() - n.shift;
    const double denom = static_cast<double>(std::max<Eigen::Index>(data.cols(), 1));
    n.scale = (centered.array().square().rowwise().sum() / denom).sqrt().max(floor).matrix();
    return n;
  }
};

inline Vector clamp(const Vector& v, double lo, double hi) { return v.cwiseMax(lo).cwiseMin(hi); }

// ---------------------------------------------------------------------------
// Policy
// ---------------------------------------------------------------------------

struct PolicyGradient {
  GradientBuffer net;
  Vector log_std;

  void zero() {
    net.zero();
    log_std.setZero();
  }
  std::vector<ParamBlock> blocks() {
    auto out = net.blocks("policy.");
    out.push_back({"policy.log_std", as_span(log_std)});
    return out;
  }
  bool is_zero() const { return net.is_zero() && (log_std.array() == 0.0).all(); }
};

/// Values and intermediates of a batched policy log-likelihood evaluation.
struct PolicyEval {
  ForwardCache cache;
  Matrix mean;
  Matrix actions;
  Vector log_prob;
};

/// pi(a|s) = N(mu(s), diag(exp(log_std))^2) with a state-independent log_std.
class GaussianPolicy {
 public:
  static constexpr double kLogStdMin = -5.0;
  static constexpr double kLogStdMax = 2.0;

  GaussianPolicy() = default;
  GaussianPolicy(DenseNet net, Vector log_std) : net_(std::move(net)), log_std_(std::move(log_std)) {
    require(log_std_.size() == net_.output_dim(), "policy log_std width must equal the action dimension");
    clamp_parameters();
  }

  static GaussianPolicy create(int state_dim, int action_dim, const std::vector<int>& hidden, Rng& rng) {
    std::vector<int> sizes{state_dim};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(action_dim);
    return GaussianPolicy(DenseNet::he_uniform(sizes, rng), Vector::Zero(action_dim));
  }

  int state_dim() const { return net_.input_dim(); }
  int action_dim() const { return net_.output_dim(); }
  DenseNet& net() { return net_; }
  const DenseNet& net() const { return net_; }
  Vector& log_std() { return log_std_; }
  const Vector& log_std() const { return log_std_; }
  Normalizer& input_normalizer() { return input_norm_; }
  const Normalizer& input_normalizer() const { return input_norm_; }

  Matrix mean(const Matrix& states, ForwardCache* cache = nullptr) const {
    check_states(states);
    return forward(net_, input_norm_.apply(states), cache);
  }
  Vector mean(const Vector& state) const { return mean(Matrix(state)).col(0); }

  PolicyEval evaluate(const Matrix& states, const Matrix& actions) const {
    require(actions.rows() == action_dim() && actions.cols() == states.cols(),
            "policy_log_prob: action batch shape mismatch");
    PolicyEval eval;
    eval.mean = mean(states, &eval.cache);
    eval.actions = actions;
    const Vector inv_var = (-2.0 * log_std_).array().exp();
    const double log_norm = log_std_.sum() + kHalfLog2Pi * action_dim();
    Matrix diff = actions - eval.mean;
    eval.log_prob = (-0.5 * (diff.array().square().colwise() * inv_var.array()).colwise().sum()).transpose();
    eval.log_prob.array() -= log_norm;
    return eval;
  }

  Vector log_prob(const Matrix& states, const Matrix& actions) const { return evaluate(states, actions).log_prob; }

  double log_prob(const Vector& state, const Vector& action) const {
    return evaluate(Matrix(state), Matrix(action)).log_prob[0];
  }

  /// Adds sum_i coeff[i] * grad log pi(a_i|s_i) into `grad`.
  void accumulate_log_prob_grad(const PolicyEval& eval, const Vector& coeff, PolicyGradient& grad) const {
    require(coeff.size() == eval.log_prob.size(), "policy gradient: coefficient count mismatch");
    const Vector inv_var = (-2.0 * log_std_).array().exp();
    Matrix diff = eval.actions - eval.mean;
    // d log pi / d mu = (a - mu) / sigma^2
    Matrix upstream = (diff.array().colwise() * inv_var.array()).rowwise() * coeff.transpose().array();
    backward(net_, eval.cache, upstream, grad.net);
    // d log pi / d log_std = (a - mu)^2 / sigma^2 - 1
    Matrix per_dim = (diff.array().square().colwise() * inv_var.array()) - 1.0;
    grad.log_std += per_dim * coeff;
  }

  PolicyGradient zero_gradient() const { return {GradientBuffer(net_), Vector::Zero(log_std_.size())}; }

  Vector sample(const Vector& state, Rng& rng) const {
    Vector mu = mean(state);
    for (Eigen::Index i = 0; i < mu.size(); ++i) mu[i] += std::exp(log_std_[i]) * rng.normal();
    return mu;
  }

  /// One sample per column, drawn in column-major order from `rng`.
  Matrix sample(const Matrix& states, Rng& rng) const {
    Matrix a = mean(states);
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      for (Eigen::Index i = 0; i < a.rows(); ++i) a(i, j) += std::exp(log_std_[i]) * rng.normal();
    }
    return a;
  }

  std::vector<ParamBlock> blocks() {
    auto out = net_.blocks("policy.");
    out.push_back({"policy.log_std", as_span(log_std_)});
    return out;
  }

  void clamp_parameters() { log_std_ = clamp(log_std_, kLogStdMin, kLogStdMax); }

  bool all_finite() const { return net_.all_finite() && log_std_.allFinite(); }

 private:
  void check_states(const Matrix& states) const {
    if (states.rows() != state_dim()) throw ContractViolation("policy: state dimension mismatch");
  }

  DenseNet net_;
  Vector log_std_;
  Normalizer input_norm_;
};

// ---------------------------------------------------------------------------
// Dynamics model
// ---------------------------------------------------------------------------

struct DynamicsGradient {
  GradientBuffer net;

  void zero() { net.zero(); }
  std::vector<ParamBlock> blocks() { return net.blocks("dynamics."); }
  bool is_zero() const { return net.is_zero(); }
};

struct DynamicsEval {
  ForwardCache cache;
  Matrix delta;        // network mean output, normalized units
  Matrix raw_log_var;  // unclamped network log-variance output
  Matrix log_var;      // clamped
  Matrix residual;     // (s' - predicted mean) / output_scale
  Vector log_prob;
};

/// f(s'|s,a) = N(s + scale * mu(s,a), diag(scale^2 * exp(log_var(s,a)))).
/// `scale` is a fixed per-dimension output unit (all ones by default).
class DynamicsModel {
 public:
  static constexpr double kLogVarMin = -10.0;
  static constexpr double kLogVarMax = 2.0;

  DynamicsModel() = default;
  DynamicsModel(DenseNet net, int state_dim) : net_(std::move(net)), state_dim_(state_dim) {
    require(net_.output_dim() == 2 * state_dim_, "dynamics net must output mean and log-variance per state dim");
    output_scale_ = Vector::Ones(state_dim_);
  }

  static DynamicsModel create(int state_dim, int action_dim, const std::vector<int>& hidden, Rng& rng) {
    std::vector<int> sizes{state_dim + action_dim};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(2 * state_dim);
    return DynamicsModel(DenseNet::he_uniform(sizes, rng), state_dim);
  }

  int state_dim() const { return state_dim_; }
  int action_dim() const { return net_.input_dim() - state_dim_; }
  DenseNet& net() { return net_; }
  const DenseNet& net() const { return net_; }
  Normalizer& input_normalizer() { return input_norm_; }
  const Normalizer& input_normalizer() const { return input_norm_; }
  Vector& output_scale() { return output_scale_; }
  const Vector& output_scale() const { return output_scale_; }

  /// Network outputs (mean delta, clamped log-variance) in normalized units.
  std::pair<Matrix, Matrix> predict(const Matrix& states, const Matrix& actions, ForwardCache* cache = nullptr,
                                    Matrix* raw_log_var = nullptr) const {
    if (states.rows() != state_dim_ || actions.rows() != action_dim() || states.cols() != actions.cols()) {
      throw ContractViolation("dynamics: state/action batch shape mismatch");
    }
    Matrix input(net_.input_dim(), states.cols());
    input.topRows(state_dim_) = states;
    input.bottomRows(action_dim()) = actions;
    Matrix out = forward(net_, input_norm_.apply(input), cache);
    Matrix lv = out.bottomRows(state_dim_);
    if (raw_log_var) *raw_log_var = lv;
    return {out.topRows(state_dim_), lv.cwiseMax(kLogVarMin).cwiseMin(kLogVarMax)};
  }

  Matrix predicted_mean(const Matrix& states, const Matrix& actions) const {
    auto [delta, lv] = predict(states, actions);
    return states + (delta.array().colwise() * output_scale_.array()).matrix();
  }

  DynamicsEval evaluate(const Matrix& states, const Matrix& actions, const Matrix& next_states) const {
    require(next_states.rows() == state_dim_ && next_states.cols() == states.cols(),
            "dynamics_log_prob: next-state batch shape mismatch");
    DynamicsEval eval;
    auto [delta, lv] = predict(states, actions, &eval.cache, &eval.raw_log_var);
    eval.delta = std::move(delta);
    eval.log_var = std::move(lv);
    Matrix mean = states + (eval.delta.array().colwise() * output_scale_.array()).matrix();
    eval.residual = (next_states - mean).array().colwise() / output_scale_.array();
    const double log_scale = output_scale_.array().log().sum();
    eval.log_prob = (-0.5 * (eval.residual.array().square() * (-eval.log_var.array()).exp()) -
                     0.5 * eval.log_var.array())
                        .colwise()
                        .sum()
                        .transpose();
    eval.log_prob.array() -= log_scale + kHalfLog2Pi * state_dim_;
    return eval;
  }

  Vector log_prob(const Matrix& s, const Matrix& a, const Matrix& s_next) const {
    return evaluate(s, a, s_next).log_prob;
  }
  double log_prob(const Vector& s, const Vector& a, const Vector& s_next) const {
    return evaluate(Matrix(s), Matrix(a), Matrix(s_next)).log_prob[0];
  }

  /// Adds sum_i coeff[i] * grad log f(s'_i|s_i,a_i) into `grad`.
  void accumulate_log_prob_grad(const DynamicsEval& eval, const Vector& coeff, DynamicsGradient& grad) const {
    require(coeff.size() == eval.log_prob.size(), "dynamics gradient: coefficient count mismatch");
    const Eigen::ArrayXXd inv_var = (-eval.log_var.array()).exp();
    Matrix upstream(2 * state_dim_, eval.log_prob.size());
    upstream.topRows(state_dim_) = (eval.residual.array() * inv_var).rowwise() * coeff.transpose().array();
    Eigen::ArrayXXd dlv = 0.5 * (eval.residual.array().square() * inv_var - 1.0);
    // Zero sub-gradient where the log-variance clamp is active.
    dlv = (eval.raw_log_var.array() < kLogVarMin || eval.raw_log_var.array() > kLogVarMax).select(0.0, dlv);
    upstream.bottomRows(state_dim_) = dlv.rowwise() * coeff.transpose().array();
    backward(net_, eval.cache, upstream, grad.net);
  }

  DynamicsGradient zero_gradient() const { return {GradientBuffer(net_)}; }

  /// s' = s + scale * (mu + exp(log_var / 2) * z), column-major draws.
  Matrix sample(const Matrix& states, const Matrix& actions, Rng& rng) const {
    auto [delta, lv] = predict(states, actions);
    Matrix next = states;
    for (Eigen::Index j = 0; j < next.cols(); ++j) {
      for (Eigen::Index i = 0; i < next.rows(); ++i) {
        next(i, j) += output_scale_[i] * (delta(i, j) + std::exp(0.5 * lv(i, j)) * rng.normal());
      }
    }
    return next;
  }
  Vector sample(const Vector& s, const Vector& a, Rng& rng) const { return sample(Matrix(s), Matrix(a), rng).col(0); }

  std::vector<ParamBlock> blocks() { return net_.blocks("dynamics."); }
  bool all_finite() const { return net_.all_finite(); }

 private:
  DenseNet net_;
  int state_dim_ = 0;
  Normalizer input_norm_;
  Vector output_scale_;
};

// ---------------------------------------------------------------------------
// Discriminators
// ---------------------------------------------------------------------------

inline constexpr double kDiscMin = 0.1;
inline constexpr double kDiscMax = 0.9;

inline double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
inline double symlog(double x) { return std::copysign(std::log1p(std::abs(x)), x); }
inline double clip_probability(double p) { return std::clamp(p, kDiscMin, kDiscMax); }

struct DiscriminatorGradient {
  GradientBuffer net;
  std::string prefix;

  void zero() { net.zero(); }
  std::vector<ParamBlock> blocks() { return net.blocks(prefix); }
  bool is_zero() const { return net.is_zero(); }
};

struct DiscriminatorEval {
  ForwardCache cache;
  Vector sigmoid;  // unclipped
  Vector output;   // clipped to [0.1, 0.9]
};

enum class DiscriminatorKind { rollout, optimality };

/// d(x) = clamp(sigmoid(net(x)), 0.1, 0.9). The rollout discriminator sees
/// (s, a, log pi, log f); the optimality discriminator sees (s, a, log pi).
/// Log-likelihood features enter through symlog(x) = sign(x) log(1 + |x|), which
/// keeps far-off-model rollouts from saturating the first layer.
template <DiscriminatorKind Kind>
class Discriminator {
 public:
  static constexpr int kLogFeatures = Kind == DiscriminatorKind::rollout ? 2 : 1;

  Discriminator() = default;
  Discriminator(DenseNet net, int state_dim, int action_dim)
      : net_(std::move(net)), state_dim_(state_dim), action_dim_(action_dim) {
    require(net_.input_dim() == feature_dim(), "discriminator input width mismatch");
    require(net_.output_dim() == 1, "discriminator must output a single logit");
  }

  static Discriminator create(int state_dim, int action_dim, const std::vector<int>& hidden, Rng& rng) {
    std::vector<int> sizes{state_dim + action_dim + kLogFeatures};
    sizes.insert(sizes.end(), hidden.begin(), hidden.end());
    sizes.push_back(1);
    DenseNet net = DenseNet::he_uniform(sizes, rng);
    net.layers().back().weight.setZero();  // start at d = 0.5 everywhere
    return Discriminator(std::move(net), state_dim, action_dim);
  }

  int feature_dim() const { return state_dim_ + action_dim_ + kLogFeatures; }
  DenseNet& net() { return net_; }
  const DenseNet& net() const { return net_; }
  Normalizer& input_normalizer() { return input_norm_; }
  const Normalizer& input_normalizer() const { return input_norm_; }
  std::string prefix() const { return Kind == DiscriminatorKind::rollout ? "disc_r." : "disc_o."; }

  /// Stacks (s, a, log pi[, log f]) into one feature column per sample.
  Matrix features(const Matrix& states, const Matrix& actions, const Vector& log_pi,
                  const Vector* log_f = nullptr) const {
    const auto n = states.cols();
    require(states.rows() == state_dim_ && actions.rows() == action_dim_ && actions.cols() == n &&
                log_pi.size() == n,
            "discriminator: feature shape mismatch");
    Matrix x(feature_dim(), n);
    x.topRows(state_dim_) = states;
    x.middleRows(state_dim_, action_dim_) = actions;
    x.row(state_dim_ + action_dim_) = log_pi.unaryExpr(&symlog).transpose();
    if constexpr (Kind == DiscriminatorKind::rollout) {
      require(log_f != nullptr && log_f->size() == n, "rollout discriminator needs log f features");
      x.row(state_dim_ + action_dim_ + 1) = log_f->unaryExpr(&symlog).transpose();
    }
    return x;
  }

  DiscriminatorEval evaluate(const Matrix& features) const {
    DiscriminatorEval eval;
    Matrix logits = forward(net_, input_norm_.apply(features), &eval.cache);
    eval.sigmoid = logits.row(0).transpose().unaryExpr([](double z) { return dmil::sigmoid(z); });
    eval.output = eval.sigmoid.unaryExpr([](double p) { return clip_probability(p); });
    return eval;
  }

  Vector output(const Matrix& features) const { return evaluate(features).output; }

  /// Adds sum_i coeff[i] * d d_i / d theta; zero where the clip is active.
  void accumulate_output_grad(const DiscriminatorEval& eval, const Vector& coeff, DiscriminatorGradient& grad) const {
    require(coeff.size() == eval.output.size(), "discriminator gradient: coefficient count mismatch");
    Matrix upstream(1, coeff.size());
    for (Eigen::Index i = 0; i < coeff.size(); ++i) {
      const double p = eval.sigmoid[i];
      const bool clipped = p < kDiscMin || p > kDiscMax;
      upstream(0, i) = clipped ? 0.0 : coeff[i] * p * (1.0 - p);
    }
    backward(net_, eval.cache, upstream, grad.net);
  }

  DiscriminatorGradient zero_gradient() const { return {GradientBuffer(net_), prefix()}; }
  std::vector<ParamBlock> blocks() { return net_.blocks(prefix()); }
  bool all_finite() const { return net_.all_finite(); }

 private:
  DenseNet net_;
  int state_dim_ = 0;
  int action_dim_ = 0;
  Normalizer input_norm_;
};

using RolloutDiscriminator = Discriminator<DiscriminatorKind::rollout>;
using OptimalityDiscriminator = Discriminator<DiscriminatorKind::optimality>;

/// Scalar conveniences matching the single-sample contract.
inline double discriminator_output(const RolloutDiscriminator& d, const Vector& s, const Vector& a, double log_pi,
                                   double log_f) {
  Vector lp(1), lf(1);
  lp << log_pi;
  lf << log_f;
  return d.output(d.features(Matrix(s), Matrix(a), lp, &lf))[0];
}

inline double optimality_output(const OptimalityDiscriminator& d, const Vector& s, const Vector& a, double log_pi) {
  Vector lp(1);
  lp << log_pi;
  return d.output(d.features(Matrix(s), Matrix(a), lp))[0];
}

// ---------------------------------------------------------------------------
// The coupled model family trained together by DMIL / D2MIL.
// ---------------------------------------------------------------------------

struct ModelSet {
  GaussianPolicy policy;
  DynamicsModel dynamics;
  RolloutDiscriminator disc_r;
  OptimalityDiscriminator disc_o;
};

struct ModelSetGradient {
  PolicyGradient policy;
  DynamicsGradient dynamics;
  DiscriminatorGradient disc_r;
  DiscriminatorGradient disc_o;

  static ModelSetGradient zeros_like(const ModelSet& m) {
    return {m.policy.zero_gradient(), m.dynamics.zero_gradient(), m.disc_r.zero_gradient(), m.disc_o.zero_gradient()};
  }
};

/// Detached (s, a, log pi, log f) features for the rollout discriminator.
inline Matrix rollout_features(const ModelSet& m, const Batch& b) {
  const Vector log_pi = m.policy.log_prob(b.states, b.actions);
  const Vector log_f = m.dynamics.log_prob(b.states, b.actions, b.next_states);
  return m.disc_r.features(b.states, b.actions, log_pi, &log_f);
}

/// Detached (s, a, log pi) features for the optimality discriminator.
inline Matrix optimality_features(const ModelSet& m, const Batch& b) {
  return m.disc_o.features(b.states, b.actions, m.policy.log_prob(b.states, b.actions));
}

}  // namespace dmil
