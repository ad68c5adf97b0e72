#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dmil/models.hpp"

namespace dmil {
namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

// Policy whose mean is exactly the first `ad` state coordinates.
GaussianPolicy passthrough_policy(int sd, int ad) {
  DenseNet net({sd, ad});
  for (int i = 0; i < ad; ++i) net.layers()[0].weight(i, i) = 1.0;
  return GaussianPolicy(std::move(net), Vector::Zero(ad));
}

// Dynamics whose mean delta and log-variance are both zero.
DynamicsModel still_dynamics(int sd, int ad) { return DynamicsModel(DenseNet({sd + ad, 2 * sd}), sd); }

double diag_gauss_log_density(const Vector& x, const Vector& mu, const Vector& log_sd) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double sd = std::exp(log_sd[i]);
    const double z = (x[i] - mu[i]) / sd;
    acc += -0.5 * z * z - std::log(sd) - 0.5 * kLog2Pi;
  }
  return acc;
}

TEST(PolicyLogProb, AtMeanUnitVariance) {
  const auto pi = passthrough_policy(2, 1);
  Vector s(2), a(1);
  s << 0.4, -1.0;
  a << 0.4;
  EXPECT_NEAR(pi.log_prob(s, a), -0.918939, 1e-6);
  EXPECT_NEAR(pi.log_prob(s, a), -kHalfLog2Pi, 1e-15);
}

TEST(PolicyLogProb, UnitDeviation) {
  const auto pi = passthrough_policy(2, 1);
  Vector s(2), a(1);
  s << 0.4, -1.0;
  a << 1.4;
  EXPECT_NEAR(pi.log_prob(s, a), -1.418939, 1e-6);
}

TEST(PolicyLogProb, MatchesDensityOracle) {
  Rng rng(4);
  auto pi = GaussianPolicy::create(3, 2, {8, 8}, rng);
  pi.log_std() << -0.7, 0.3;
  for (int trial = 0; trial < 20; ++trial) {
    Vector s(3), a(2);
    for (int i = 0; i < 3; ++i) s[i] = rng.normal();
    for (int i = 0; i < 2; ++i) a[i] = rng.normal();
    EXPECT_NEAR(pi.log_prob(s, a), diag_gauss_log_density(a, pi.mean(s), pi.log_std()), 1e-12);
  }
}

TEST(PolicyLogProb, ShapeMismatchThrows) {
  const auto pi = passthrough_policy(2, 1);
  EXPECT_THROW(pi.log_prob(Vector(Vector::Zero(3)), Vector(Vector::Zero(1))), ContractViolation);
  EXPECT_THROW(pi.log_prob(Vector(Vector::Zero(2)), Vector(Vector::Zero(2))), ContractViolation);
}

TEST(PolicyLogStd, ClampedToRange) {
  Vector ls(2);
  ls << -9.0, 4.0;
  GaussianPolicy pi(DenseNet({1, 2}), ls);
  EXPECT_EQ(pi.log_std()[0], GaussianPolicy::kLogStdMin);
  EXPECT_EQ(pi.log_std()[1], GaussianPolicy::kLogStdMax);
}

TEST(PolicySample, DeterministicForSeed) {
  Rng init(1);
  const auto pi = GaussianPolicy::create(3, 2, {8}, init);
  const Vector s = Vector::Constant(3, 0.2);
  Rng a(99), b(99);
  EXPECT_EQ(pi.sample(s, a), pi.sample(s, b));
}

TEST(PolicySample, MonteCarloMeanAndStd) {
  auto pi = passthrough_policy(1, 1);
  pi.log_std()[0] = std::log(0.5);
  Rng rng(3);
  const Vector s = Vector::Constant(1, 2.0);
  const int n = 40000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = pi.sample(s, rng)[0];
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n, sd = std::sqrt(sq / n - mean * mean);
  EXPECT_NEAR(mean, 2.0, 4 * 0.5 / std::sqrt(n));
  EXPECT_NEAR(sd, 0.5, 0.01);
}

TEST(PolicySample, ClampFloorStaysNearMean) {
  auto pi = passthrough_policy(2, 2);
  pi.log_std() = Vector::Constant(2, -50.0);
  pi.clamp_parameters();
  Rng rng(8);
  Vector s(2);
  s << 0.3, -0.9;
  const double sigma = std::exp(GaussianPolicy::kLogStdMin);
  const double p_band = std::erf(1e-2 / (sigma * std::sqrt(2.0)));
  constexpr int n = 20000;
  int inside = 0;
  double worst = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vector dev = (pi.sample(s, rng) - s).cwiseAbs();
    inside += (dev.array() < 1e-2).count();
    worst = std::max(worst, dev.maxCoeff());
  }
  EXPECT_NEAR(static_cast<double>(inside) / (2 * n), p_band, 4 * std::sqrt(p_band * (1 - p_band) / (2 * n)));
  EXPECT_LT(worst, 6 * sigma);
}

TEST(PolicyGradient, VanishesInMeanAtTheMean) {
  auto pi = passthrough_policy(2, 2);
  Matrix s(2, 1);
  s << 0.5, -0.5;
  const auto eval = pi.evaluate(s, s);
  auto g = pi.zero_gradient();
  pi.accumulate_log_prob_grad(eval, Vector::Ones(1), g);
  EXPECT_TRUE(g.net.is_zero());
  // d/dlog_std at the mean is -1 per dimension.
  EXPECT_DOUBLE_EQ(g.log_std[0], -1.0);
}

TEST(DynamicsLogProb, PerfectMean) {
  const auto f = still_dynamics(4, 1);
  const Vector s = Vector::Constant(4, 0.3), a = Vector::Constant(1, -1.0);
  EXPECT_NEAR(f.log_prob(s, a, s), -2.0 * kLog2Pi, 1e-12);
}

TEST(DynamicsLogProb, DeviationOfTwo) {
  const auto f = still_dynamics(1, 1);
  const Vector s = Vector::Constant(1, 0.3), a = Vector::Constant(1, 0.0);
  EXPECT_NEAR(f.log_prob(s, a, Vector(Vector::Constant(1, 2.3))), -0.5 * kLog2Pi - 2.0, 1e-12);
}

TEST(DynamicsLogProb, MatchesDensityOracle) {
  Rng rng(12);
  auto f = DynamicsModel::create(3, 2, {8, 8}, rng);
  f.output_scale() << 0.5, 2.0, 1.0;
  for (int trial = 0; trial < 20; ++trial) {
    Vector s(3), a(2), sn(3);
    for (int i = 0; i < 3; ++i) s[i] = rng.normal();
    for (int i = 0; i < 2; ++i) a[i] = rng.normal();
    for (int i = 0; i < 3; ++i) sn[i] = s[i] + rng.normal();
    auto [delta, lv] = f.predict(Matrix(s), Matrix(a));
    const Vector mu = s + (delta.col(0).array() * f.output_scale().array()).matrix();
    const Vector log_sd = (0.5 * lv.col(0).array() + f.output_scale().array().log()).matrix();
    EXPECT_NEAR(f.log_prob(s, a, sn), diag_gauss_log_density(sn, mu, log_sd), 1e-12);
  }
}

TEST(DynamicsLogProb, DensityIntegratesToOne) {
  // 1-D: importance sampling with a wide Gaussian proposal.
  Rng init(6);
  const auto f = DynamicsModel::create(1, 1, {4}, init);
  const Vector s = Vector::Constant(1, 0.2), a = Vector::Constant(1, 0.1);
  const double center = f.predicted_mean(Matrix(s), Matrix(a))(0, 0);
  Rng rng(7);
  const double q_sd = 5.0;
  const int n = 200000;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = center + q_sd * rng.normal();
    const double log_q = -0.5 * std::pow((x - center) / q_sd, 2) - std::log(q_sd) - 0.5 * kLog2Pi;
    acc += std::exp(f.log_prob(s, a, Vector(Vector::Constant(1, x))) - log_q);
  }
  EXPECT_NEAR(acc / n, 1.0, 0.01);
}

TEST(DynamicsLogVar, ClampedInLikelihood) {
  DynamicsModel f(DenseNet({2, 2}), 1);
  f.net().layers()[0].bias[1] = -40.0;  // raw log-variance far below the floor
  Matrix s = Matrix::Zero(1, 1), a = Matrix::Zero(1, 1);
  const auto eval = f.evaluate(s, a, s);
  EXPECT_EQ(eval.log_var(0, 0), DynamicsModel::kLogVarMin);
  EXPECT_NEAR(eval.log_prob[0], -0.5 * kLog2Pi + 5.0, 1e-12);
}

TEST(DynamicsSample, NearIdentityAtFloor) {
  DynamicsModel f(DenseNet({5, 8}), 4);
  f.net().layers()[0].bias.tail(4).setConstant(DynamicsModel::kLogVarMin);
  Rng rng(1);
  const Vector s = Vector::LinSpaced(4, -1.0, 1.0), a = Vector::Zero(1);
  const double sigma = std::exp(0.5 * DynamicsModel::kLogVarMin);
  const double p_band = std::erf(1e-2 / (sigma * std::sqrt(2.0)));
  constexpr int n = 10000;
  int inside = 0;
  double worst = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vector dev = (f.sample(s, a, rng) - s).cwiseAbs();
    inside += (dev.array() < 1e-2).count();
    worst = std::max(worst, dev.maxCoeff());
  }
  EXPECT_NEAR(static_cast<double>(inside) / (4 * n), p_band, 4 * std::sqrt(p_band * (1 - p_band) / (4 * n)));
  EXPECT_LT(worst, 6 * sigma);
}

TEST(Discriminator, ZeroNetIsOneHalf) {
  RolloutDiscriminator d(DenseNet({4 + 1 + 2, 3, 1}), 4, 1);
  EXPECT_DOUBLE_EQ(discriminator_output(d, Vector(Vector::Ones(4)), Vector(Vector::Ones(1)), -3.0, 7.0), 0.5);
  OptimalityDiscriminator o(DenseNet({4 + 1 + 1, 1}), 4, 1);
  EXPECT_DOUBLE_EQ(optimality_output(o, Vector(Vector::Ones(4)), Vector(Vector::Ones(1)), -3.0), 0.5);
}

TEST(Discriminator, LogitsClampToBand) {
  RolloutDiscriminator d(DenseNet({1 + 1 + 2, 1}), 1, 1);
  const Vector s = Vector::Zero(1), a = Vector::Zero(1);
  d.net().layers()[0].bias[0] = 10.0;
  EXPECT_GT(sigmoid(10.0), 0.9999);
  EXPECT_DOUBLE_EQ(discriminator_output(d, s, a, 0.0, 0.0), 0.9);
  d.net().layers()[0].bias[0] = -10.0;
  EXPECT_DOUBLE_EQ(discriminator_output(d, s, a, 0.0, 0.0), 0.1);
}

TEST(Discriminator, ClippedSamplesGiveNoGradient) {
  RolloutDiscriminator d(DenseNet({1 + 1 + 2, 1}), 1, 1);
  d.net().layers()[0].bias[0] = 10.0;
  Vector lp = Vector::Zero(1), lf = Vector::Zero(1);
  const auto eval = d.evaluate(d.features(Matrix::Zero(1, 1), Matrix::Zero(1, 1), lp, &lf));
  auto g = d.zero_gradient();
  d.accumulate_output_grad(eval, Vector::Ones(1), g);
  EXPECT_TRUE(g.is_zero());
}

TEST(Discriminator, FeatureShapeMismatchThrows) {
  RolloutDiscriminator d(DenseNet({4 + 1 + 2, 1}), 4, 1);
  Vector lp = Vector::Zero(2);
  EXPECT_THROW(d.features(Matrix::Zero(4, 2), Matrix::Zero(1, 2), lp, nullptr), ContractViolation);
  EXPECT_THROW(d.features(Matrix::Zero(3, 2), Matrix::Zero(1, 2), lp, &lp), ContractViolation);
}

TEST(Discriminator, FreshOutputLayerStartsAtOneHalf) {
  Rng rng(2);
  const auto d = OptimalityDiscriminator::create(4, 1, {16, 16}, rng);
  Rng data(3);
  Matrix s(4, 50), a(1, 50);
  for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = 10.0 * data.normal();
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = data.normal();
  const Vector out = d.output(d.features(s, a, Vector(Vector::Constant(50, -200.0))));
  EXPECT_TRUE((out.array() == 0.5).all());
}

}  // namespace
}  // namespace dmil
