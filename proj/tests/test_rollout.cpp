#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "dmil/rollout.hpp"

namespace dmil {
namespace {

constexpr int kSd = 4, kAd = 1;

GaussianPolicy quiet_policy() {
  GaussianPolicy pi(DenseNet({kSd, 8, kAd}), Vector::Zero(kAd));
  pi.log_std().setConstant(GaussianPolicy::kLogStdMin);
  return pi;
}

// Zero mean delta, log-variance pinned at `log_var`.
DynamicsModel flat_dynamics(double log_var) {
  DynamicsModel f(DenseNet({kSd + kAd, 2 * kSd}), kSd);
  f.net().layers()[0].bias.tail(kSd).setConstant(log_var);
  return f;
}

Matrix starts(int n, std::uint64_t seed) {
  Rng rng(seed);
  Matrix s(kSd, n);
  for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = 0.1 * rng.normal();
  return s;
}

Transition tagged(double x, Origin origin = Origin::expert) {
  return {Vector::Constant(kSd, x), Vector::Constant(kAd, x), Vector::Constant(kSd, x), origin};
}

const Vector kWideGuard = Vector::Constant(kSd, 1e6);

TEST(Rollouts, HorizonOneGivesOnePerStart) {
  RolloutConfig cfg;
  cfg.horizon = 1;
  Rng rng(1);
  const auto res = generate_rollouts(quiet_policy(), flat_dynamics(-4.0), starts(17, 2), cfg, kWideGuard, rng);
  EXPECT_EQ(res.transitions.size(), 17u);
  EXPECT_EQ(res.truncated, 0u);
  for (const auto& t : res.transitions) EXPECT_EQ(t.origin, Origin::rollout);
}

TEST(Rollouts, NearIdentityDynamicsAtFloor) {
  RolloutConfig cfg;
  cfg.horizon = 1;
  Rng rng(3);
  const auto res = generate_rollouts(quiet_policy(), flat_dynamics(DynamicsModel::kLogVarMin), starts(2000, 4), cfg,
                                     kWideGuard, rng);
  const double sigma = std::exp(0.5 * DynamicsModel::kLogVarMin);
  const double p_band = std::erf(1e-2 / (sigma * std::sqrt(2.0)));
  double inside = 0.0;
  for (const auto& t : res.transitions) {
    const Vector dev = (t.s_next - t.s).cwiseAbs();
    inside += static_cast<double>((dev.array() < 1e-2).count());
    EXPECT_LT(dev.maxCoeff(), 6 * sigma);
  }
  const double cells = static_cast<double>(res.transitions.size() * kSd);
  EXPECT_NEAR(inside / cells, p_band, 4 * std::sqrt(p_band * (1 - p_band) / cells));
}

TEST(Rollouts, BranchesChainThroughHorizon) {
  RolloutConfig cfg;
  cfg.horizon = 3;
  Rng rng(5);
  const Matrix s0 = starts(6, 6);
  const auto res = generate_rollouts(quiet_policy(), flat_dynamics(-2.0), s0, cfg, kWideGuard, rng);
  ASSERT_EQ(res.transitions.size(), 18u);
  std::map<std::size_t, std::vector<const Transition*>> by_branch;
  for (std::size_t k = 0; k < res.transitions.size(); ++k) by_branch[res.branch[k]].push_back(&res.transitions[k]);
  ASSERT_EQ(by_branch.size(), 6u);
  for (const auto& [b, chain] : by_branch) {
    ASSERT_EQ(chain.size(), 3u);
    EXPECT_EQ(chain[0]->s, Vector(s0.col(static_cast<Eigen::Index>(b))));
    EXPECT_EQ(chain[1]->s, chain[0]->s_next);
    EXPECT_EQ(chain[2]->s, chain[1]->s_next);
  }
}

TEST(Rollouts, GuardTruncatesDivergentBranches) {
  RolloutConfig cfg;
  cfg.horizon = 5;
  Rng rng(7);
  const auto res = generate_rollouts(quiet_policy(), flat_dynamics(DynamicsModel::kLogVarMax), starts(50, 8), cfg,
                                     Vector::Constant(kSd, 0.02), rng);
  EXPECT_GT(res.truncated, 0u);
  for (const auto& t : res.transitions) EXPECT_LE(t.s_next.cwiseAbs().maxCoeff(), 0.2);
}

TEST(Rollouts, DeterministicForSeed) {
  RolloutConfig cfg;
  Rng a(9), b(9);
  const auto ra = generate_rollouts(quiet_policy(), flat_dynamics(-3.0), starts(8, 1), cfg, kWideGuard, a);
  const auto rb = generate_rollouts(quiet_policy(), flat_dynamics(-3.0), starts(8, 1), cfg, kWideGuard, b);
  ASSERT_EQ(ra.transitions.size(), rb.transitions.size());
  for (std::size_t k = 0; k < ra.transitions.size(); ++k) EXPECT_EQ(ra.transitions[k].s_next, rb.transitions[k].s_next);
}

TEST(Buffer, PushWithinCapacity) {
  RolloutBuffer buf(10);
  buf.push({tagged(1), tagged(2), tagged(3)});
  EXPECT_EQ(buf.size(), 3u);
}

TEST(Buffer, FifoEvictionKeepsNewest) {
  RolloutBuffer buf(5);
  std::vector<Transition> batch;
  for (int i = 0; i < 8; ++i) batch.push_back(tagged(i));
  buf.push(batch);
  ASSERT_EQ(buf.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(buf.at(i).s[0], static_cast<double>(i + 3));
  buf.push({tagged(8), tagged(9)});
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(buf.at(i).s[0], static_cast<double>(i + 5));
}

TEST(Buffer, OriginAlwaysRollout) {
  RolloutBuffer buf(4);
  buf.push({tagged(1, Origin::expert), tagged(2, Origin::suboptimal)});
  for (const auto& t : buf.snapshot()) EXPECT_EQ(t.origin, Origin::rollout);
}

TEST(Buffer, SizeOneAlwaysDrawsSameElement) {
  RolloutBuffer buf(1);
  buf.push({tagged(4), tagged(7)});
  Rng rng(1);
  const Batch b = buf.sample_batch(100, kSd, kAd, rng);
  EXPECT_TRUE((b.states.array() == 7.0).all());
}

TEST(Buffer, ZeroDrawsAndEmptyBuffer) {
  RolloutBuffer buf(3);
  Rng rng(1);
  EXPECT_TRUE(buf.sample_batch(10, kSd, kAd, rng).empty());
  buf.push({tagged(1)});
  const Batch none = buf.sample_batch(0, kSd, kAd, rng);
  EXPECT_TRUE(none.empty());
  EXPECT_EQ(none.states.rows(), kSd);
}

TEST(Buffer, SamplingIsUniform) {
  constexpr int k = 10, draws = 50000;
  RolloutBuffer buf(k);
  std::vector<Transition> items;
  for (int i = 0; i < k; ++i) items.push_back(tagged(i));
  buf.push(items);
  Rng rng(11);
  const Batch b = buf.sample_batch(draws, kSd, kAd, rng);
  std::vector<int> counts(k, 0);
  for (Eigen::Index j = 0; j < b.size(); ++j) ++counts[static_cast<std::size_t>(b.states(0, j))];
  double chi2 = 0.0;
  const double expected = static_cast<double>(draws) / k;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 27.88);  // 0.999 quantile, 9 dof
}

TEST(Buffer, ZeroCapacityRejected) { EXPECT_THROW(RolloutBuffer(0), ContractViolation); }

}  // namespace
}  // namespace dmil
