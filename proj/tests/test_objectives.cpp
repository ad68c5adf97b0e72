#include <gtest/gtest.h>

#include <numbers>

#include "dmil/check.hpp"
#include "dmil/objectives.hpp"

namespace dmil {
namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

GaussianPolicy passthrough_policy(int sd, int ad) {
  DenseNet net({sd, ad});
  for (int i = 0; i < ad; ++i) net.layers()[0].weight(i, i) = 1.0;
  return GaussianPolicy(std::move(net), Vector::Zero(ad));
}

Batch make_batch(const Matrix& s, const Matrix& a, const Matrix& sn) {
  return {s, a, sn, std::vector<Origin>(static_cast<std::size_t>(s.cols()), Origin::expert)};
}

double sum_minus_log_pi(const GaussianPolicy& pi, const Batch& b, const std::function<double(Eigen::Index)>& w) {
  double acc = 0.0;
  for (Eigen::Index j = 0; j < b.size(); ++j) {
    acc += -w(j) * pi.log_prob(Vector(b.states.col(j)), Vector(b.actions.col(j)));
  }
  return acc / static_cast<double>(b.size());
}

TEST(BcLoss, AtMeanUnitVariance) {
  const auto pi = passthrough_policy(2, 1);
  Matrix s(2, 3);
  s << 0.1, 0.2, 0.3, 1.0, 2.0, 3.0;
  const Batch b = make_batch(s, s.topRows(1), s);
  EXPECT_NEAR(bc_loss(pi, b), 0.918939, 1e-6);
}

TEST(BcLoss, MatchesResummation) {
  CheckFixture fx(5);
  const double ref = sum_minus_log_pi(fx.models.policy, fx.expert, [](Eigen::Index) { return 1.0; });
  EXPECT_NEAR(bc_loss(fx.models.policy, fx.expert), ref, 1e-12);
}

TEST(BcLoss, DuplicatingBatchIsInvariant) {
  CheckFixture fx(6);
  const Batch twice = concat(fx.expert, fx.expert);
  EXPECT_NEAR(bc_loss(fx.models.policy, twice), bc_loss(fx.models.policy, fx.expert), 1e-12);
}

TEST(BcLoss, EmptyBatchThrows) {
  const auto pi = passthrough_policy(2, 1);
  EXPECT_THROW(bc_loss(pi, Batch::empty_like(2, 1)), ContractViolation);
}

TEST(DynamicsNll, PerfectMeanFourDims) {
  DynamicsModel f(DenseNet({5, 8}), 4);
  Matrix s = Matrix::Random(4, 6);
  const Batch b = make_batch(s, Matrix::Random(1, 6), s);
  EXPECT_NEAR(dynamics_nll_loss(f, b), 3.675754, 1e-6);
  EXPECT_NEAR(dynamics_nll_loss(f, b), 2.0 * kLog2Pi, 1e-12);
}

TEST(RolloutDiscLoss, SpotValues) {
  const Vector half = Vector::Constant(8, 0.5);
  EXPECT_NEAR(rollout_disc_loss(half, half), 2.0 * std::numbers::ln2, 1e-12);
  EXPECT_NEAR(rollout_disc_loss(Vector(Vector::Constant(8, 0.9)), Vector(Vector::Constant(5, 0.1))), 0.210721, 1e-6);
}

TEST(RolloutDiscLoss, BoundedByClamp) {
  // Worst case: expert at 0.1, rollout at 0.9.
  const double worst = rollout_disc_loss(Vector(Vector::Constant(3, 0.1)), Vector(Vector::Constant(3, 0.9)));
  EXPECT_NEAR(worst, -2.0 * std::log(0.1), 1e-12);
}

TEST(PuLoss, SpotValues) {
  const Vector half = Vector::Constant(8, 0.5);
  EXPECT_NEAR(pu_disc_loss(half, half, 0.5), std::numbers::ln2, 1e-12);
  Rng rng(1);
  const Vector de = CheckFixture::random_d(rng, 7), du = CheckFixture::random_d(rng, 9);
  EXPECT_NEAR(pu_disc_loss(de, du, 0.0), -(1.0 - du.array()).log().mean(), 1e-12);
}

TEST(PuLoss, UnlabeledTermMayGoNegative) {
  const Vector de = Vector::Constant(4, 0.9), du = Vector::Constant(4, 0.1);
  const auto terms = pu_disc_terms(de, du, 0.9);
  EXPECT_NEAR(terms.unlabeled, -std::log(0.9) + 0.9 * std::log(0.1), 1e-12);
  EXPECT_LT(terms.unlabeled, 0.0);
  EXPECT_NEAR(terms.total(), terms.positive + terms.unlabeled, 0.0);
}

TEST(DmilWeights, SpotValues) {
  auto w = dmil_weights(0.5, 10.0);
  EXPECT_NEAR(w.expert, 8.0, 1e-12);
  EXPECT_NEAR(w.rollout, 2.0, 1e-12);
  w = dmil_weights(0.1, 10.0);
  EXPECT_NEAR(w.expert, 0.0, 1e-12);
  EXPECT_NEAR(w.rollout, 1.0 / 0.9, 1e-12);
  w = dmil_weights(0.9, 10.0);
  EXPECT_NEAR(w.expert, 10.0 - 1.0 / 0.9, 1e-12);
  EXPECT_NEAR(w.rollout, 10.0, 1e-12);
}

TEST(DmilWeights, OutsideBandThrows) {
  EXPECT_THROW(dmil_weights(0.05, 10.0), ContractViolation);
  EXPECT_THROW(dmil_weights(0.95, 10.0), ContractViolation);
  EXPECT_THROW(dmil_weights(std::numeric_limits<double>::quiet_NaN(), 10.0), ContractViolation);
}

TEST(D2milWeights, SpotValues) {
  const HyperParams hp;
  auto w = d2mil_policy_weights(0.5, 0.5, hp);
  EXPECT_NEAR(w.expert, 8.0, 1e-12);
  EXPECT_NEAR(w.suboptimal, 0.0, 1e-12);
  EXPECT_NEAR(w.rollout, 2.0, 1e-12);
  w = d2mil_policy_weights(0.9, 0.9, hp);
  EXPECT_NEAR(w.expert, 10.0 - 0.25 / 0.09 - 0.5 / 0.9, 1e-12);
  EXPECT_NEAR(w.expert, 6.6667, 1e-4);
  EXPECT_NEAR(w.suboptimal, 4.4444, 1e-4);
  EXPECT_NEAR(w.rollout, 10.0, 1e-12);
  w = d2mil_policy_weights(0.1, 0.1, hp);
  EXPECT_NEAR(w.expert, 2.2222, 1e-4);
  EXPECT_NEAR(w.suboptimal, -4.4444, 1e-4);
  EXPECT_NEAR(w.rollout, 1.1111, 1e-4);
}

TEST(DmilPolicyLoss, AlphaTwoAtOneHalfKeepsOnlyRollouts) {
  CheckFixture fx(2);
  const auto& pi = fx.models.policy;
  const Vector de = Vector::Constant(fx.expert.size(), 0.5), dr = Vector::Constant(fx.rollout.size(), 0.5);
  EXPECT_NEAR(dmil_policy_loss(pi, fx.expert, fx.rollout, de, dr, 2.0), 2.0 * bc_loss(pi, fx.rollout), 1e-12);
}

TEST(DmilPolicyLoss, AlphaTenAtOneHalf) {
  CheckFixture fx(3);
  const auto& pi = fx.models.policy;
  const Vector de = Vector::Constant(fx.expert.size(), 0.5), dr = Vector::Constant(fx.rollout.size(), 0.5);
  EXPECT_NEAR(dmil_policy_loss(pi, fx.expert, fx.rollout, de, dr, 10.0),
              8.0 * bc_loss(pi, fx.expert) + 2.0 * bc_loss(pi, fx.rollout), 1e-12);
}

TEST(DmilPolicyLoss, MatchesResummationWithRandomD) {
  CheckFixture fx(4);
  Rng rng(9);
  const auto& pi = fx.models.policy;
  const Vector de = CheckFixture::random_d(rng, fx.expert.size()), dr = CheckFixture::random_d(rng, fx.rollout.size());
  const double ref = sum_minus_log_pi(pi, fx.expert, [&](Eigen::Index j) { return 10.0 - 1.0 / de[j]; }) +
                     sum_minus_log_pi(pi, fx.rollout, [&](Eigen::Index j) { return 1.0 / (1.0 - dr[j]); });
  EXPECT_NEAR(dmil_policy_loss(pi, fx.expert, fx.rollout, de, dr, 10.0), ref, 1e-12);
}

TEST(DmilPolicyLoss, PermutationInvariant) {
  CheckFixture fx(7);
  Rng rng(3);
  const auto& pi = fx.models.policy;
  const Vector de = CheckFixture::random_d(rng, fx.expert.size()), dr = CheckFixture::random_d(rng, fx.rollout.size());
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(fx.expert.size());
  perm.setIdentity();
  std::shuffle(perm.indices().data(), perm.indices().data() + perm.indices().size(), rng.engine());
  Batch shuffled = fx.expert;
  shuffled.states = fx.expert.states * perm;
  shuffled.actions = fx.expert.actions * perm;
  shuffled.next_states = fx.expert.next_states * perm;
  const Vector de_shuffled = perm.transpose() * de;
  EXPECT_NEAR(dmil_policy_loss(pi, shuffled, fx.rollout, de_shuffled, dr, 10.0),
              dmil_policy_loss(pi, fx.expert, fx.rollout, de, dr, 10.0), 1e-12);
}

TEST(DmilPolicyLoss, EmptyRolloutSkipsTerm) {
  CheckFixture fx(8);
  const auto& pi = fx.models.policy;
  const Vector de = Vector::Constant(fx.expert.size(), 0.5);
  EXPECT_NEAR(dmil_policy_loss(pi, fx.expert, Batch::empty_like(3, 2), de, Vector(0), 10.0),
              8.0 * bc_loss(pi, fx.expert), 1e-12);
}

TEST(DmilDynamicsLoss, AlphaTenAtOneHalf) {
  CheckFixture fx(10);
  const auto& f = fx.models.dynamics;
  const Vector de = Vector::Constant(fx.expert.size(), 0.5), dr = Vector::Constant(fx.rollout.size(), 0.5);
  EXPECT_NEAR(dmil_dynamics_loss(f, fx.expert, fx.rollout, de, dr, 10.0),
              8.0 * dynamics_nll_loss(f, fx.expert) + 2.0 * dynamics_nll_loss(f, fx.rollout), 1e-12);
}

TEST(D2milPolicyLoss, MatchesResummation) {
  CheckFixture fx(11);
  Rng rng(5);
  const HyperParams hp;
  const auto& pi = fx.models.policy;
  auto dv = [&](const Batch& b) { return DValues{CheckFixture::random_d(rng, b.size()), CheckFixture::random_d(rng, b.size())}; };
  const DValues ve = dv(fx.expert), vo = dv(fx.suboptimal), vr = dv(fx.rollout);
  auto w = [&](const DValues& v, Eigen::Index j) { return d2mil_policy_weights(v.d_o[j], v.d_r[j], hp); };
  const double ref = sum_minus_log_pi(pi, fx.expert, [&](Eigen::Index j) { return w(ve, j).expert; }) +
                     sum_minus_log_pi(pi, fx.suboptimal, [&](Eigen::Index j) { return w(vo, j).suboptimal; }) +
                     sum_minus_log_pi(pi, fx.rollout, [&](Eigen::Index j) { return w(vr, j).rollout; });
  EXPECT_NEAR(d2mil_policy_loss(pi, fx.expert, fx.suboptimal, fx.rollout, ve, vo, vr, hp), ref, 1e-12);
}

TEST(D2milPolicyLoss, GradientMatchesFiniteDifferences) {
  CheckFixture fx(12);
  Rng rng(6);
  const HyperParams hp;
  auto& pi = fx.models.policy;
  auto dv = [&](const Batch& b) { return DValues{CheckFixture::random_d(rng, b.size()), CheckFixture::random_d(rng, b.size())}; };
  const DValues ve = dv(fx.expert), vo = dv(fx.suboptimal), vr = dv(fx.rollout);
  auto g = pi.zero_gradient();
  d2mil_policy_loss(pi, fx.expert, fx.suboptimal, fx.rollout, ve, vo, vr, hp, &g);
  auto loss = [&] { return d2mil_policy_loss(pi, fx.expert, fx.suboptimal, fx.rollout, ve, vo, vr, hp); };
  EXPECT_LT(finite_difference_check(loss, pi.blocks(), dmil::as_const(g.blocks())).max_relative_error, 1e-4);
}

TEST(BcFinetuneLoss, EmptyRolloutEqualsBc) {
  CheckFixture fx(13);
  EXPECT_EQ(bc_finetune_loss(fx.models.policy, fx.expert, Batch::empty_like(3, 2)), bc_loss(fx.models.policy, fx.expert));
}

TEST(BcFinetuneLoss, EqualHalvesAverage) {
  CheckFixture fx(14);
  const auto& pi = fx.models.policy;
  EXPECT_NEAR(bc_finetune_loss(pi, fx.expert, fx.rollout), 0.5 * (bc_loss(pi, fx.expert) + bc_loss(pi, fx.rollout)),
              1e-12);
}

TEST(HyperParams, Validation) {
  HyperParams hp;
  EXPECT_NO_THROW(hp.validate());
  hp.beta_o = 0.7;
  EXPECT_THROW(hp.validate(), ContractViolation);
  hp = {};
  hp.eta = 1.0;
  EXPECT_THROW(hp.validate(), ContractViolation);
  hp = {};
  hp.alpha_pi = 0.5;
  EXPECT_THROW(hp.validate(), ContractViolation);
}

TEST(PropertySuite, AllPass) {
  for (const auto& r : run_property_checks()) EXPECT_TRUE(r.passed) << r.name << ": " << r.detail;
}

TEST(PropertySuite, DetectsWeightSignFault) {
  CheckOptions opt;
  opt.inject_weight_sign_error = true;
  std::vector<std::string> failed;
  for (const auto& r : run_property_checks(opt)) {
    if (!r.passed) failed.push_back(r.name);
  }
  EXPECT_NE(std::find(failed.begin(), failed.end(), "dmil_weights_spot"), failed.end());
}

}  // namespace
}  // namespace dmil
