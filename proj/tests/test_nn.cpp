#include <gtest/gtest.h>

#include <sstream>

#include "dmil/checkpoint.hpp"
#include "dmil/nn.hpp"

namespace dmil {
namespace {

DenseNet random_net(std::vector<int> sizes, std::uint64_t seed) {
  Rng rng(seed);
  DenseNet net = DenseNet::he_uniform(std::move(sizes), rng);
  for (auto& l : net.layers()) {
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = rng.uniform(-0.5, 0.5);
  }
  return net;
}

// Straight-line re-evaluation with explicit loops.
Vector loop_forward(const DenseNet& net, const Vector& x) {
  std::vector<double> h(x.data(), x.data() + x.size());
  const auto& layers = net.layers();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& W = layers[k].weight;
    std::vector<double> next(static_cast<std::size_t>(W.rows()));
    for (Eigen::Index i = 0; i < W.rows(); ++i) {
      double acc = layers[k].bias[i];
      for (Eigen::Index j = 0; j < W.cols(); ++j) acc += W(i, j) * h[static_cast<std::size_t>(j)];
      next[static_cast<std::size_t>(i)] = (k + 1 < layers.size() && acc < 0.0) ? 0.0 : acc;
    }
    h = std::move(next);
  }
  return Eigen::Map<Vector>(h.data(), static_cast<Eigen::Index>(h.size()));
}

TEST(Forward, ZeroNetGivesZero) {
  DenseNet net({3, 5, 2});
  Vector x(3);
  x << 1.0, -7.0, 42.0;
  EXPECT_TRUE(forward(net, x).isZero(0.0));
}

TEST(Forward, IdentityLayerHasNoOutputActivation) {
  DenseNet net({2, 2});
  net.layers()[0].weight.setIdentity();
  Vector x(2);
  x << 1.5, -2.0;
  const Vector y = forward(net, x);
  EXPECT_EQ(y[0], 1.5);
  EXPECT_EQ(y[1], -2.0);
}

TEST(Forward, MatchesLoopOracle) {
  const DenseNet net = random_net({3, 4, 2}, 11);
  Vector x(3);
  x << 0.3, -1.2, 0.8;
  const Vector y = forward(net, x), ref = loop_forward(net, x);
  for (Eigen::Index i = 0; i < 2; ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
}

TEST(Forward, DimensionMismatchThrows) {
  DenseNet net({3, 2});
  EXPECT_THROW(forward(net, Vector(Vector::Zero(4))), ContractViolation);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  const DenseNet net = random_net({3, 6, 2}, 3);
  ForwardCache cache;
  forward(net, Matrix(Matrix::Random(3, 5)), &cache);
  auto [grads, input_grad] = backward(net, cache, Matrix::Zero(2, 5));
  EXPECT_TRUE(grads.is_zero());
  EXPECT_TRUE(input_grad.isZero(0.0));
}

TEST(Backward, ScalarLinear) {
  DenseNet net({1, 1});
  net.layers()[0].weight(0, 0) = 0.7;
  ForwardCache cache;
  forward(net, Matrix::Constant(1, 1, 2.0), &cache);
  auto [grads, input_grad] = backward(net, cache, Matrix::Ones(1, 1));
  EXPECT_DOUBLE_EQ(grads.layers()[0].weight(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(grads.layers()[0].bias[0], 1.0);
  EXPECT_DOUBLE_EQ(input_grad(0, 0), 0.7);
}

TEST(Backward, MissingCacheThrows) {
  const DenseNet net = random_net({2, 3, 1}, 1);
  ForwardCache empty;
  EXPECT_THROW(backward(net, empty, Matrix::Ones(1, 1)), ContractViolation);
}

TEST(Backward, MatchesFiniteDifferences) {
  DenseNet net = random_net({4, 7, 5, 3}, 21);
  Rng rng(5);
  Matrix x(4, 6), target(3, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < target.size(); ++i) target.data()[i] = rng.normal();
  auto loss = [&] { return 0.5 * (forward(net, x) - target).squaredNorm(); };
  ForwardCache cache;
  const Matrix y = forward(net, x, &cache);
  auto [grads, input_grad] = backward(net, cache, y - target);
  const auto report = finite_difference_check(loss, net.blocks(), dmil::as_const(grads.blocks()));
  EXPECT_LT(report.max_relative_error, 1e-6) << report.worst_block << "[" << report.worst_index << "]";
  EXPECT_EQ(report.checked, net.parameter_count());
}

TEST(Adam, ZeroGradientLeavesParamsAndCountsStep) {
  Vector p(3);
  p << 1.0, -2.0, 3.0;
  const Vector before = p;
  Vector g = Vector::Zero(3);
  AdamState adam(AdamConfig{1e-3});
  adam.step({{"p", as_span(p)}}, {{"p", as_span(g)}});
  EXPECT_EQ(p, before);
  EXPECT_EQ(adam.step_count(), 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Vector p = Vector::Constant(1, 0.25);
  Vector g = Vector::Ones(1);
  AdamState adam(AdamConfig{1e-4});
  adam.step({{"p", as_span(p)}}, {{"p", as_span(g)}});
  EXPECT_NEAR(0.25 - p[0], 1e-4 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, MatchesHandUnrolledRecurrence) {
  // Minimize 0.5 * c * x^2 for three steps.
  const double c = 3.0, lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Vector p = Vector::Constant(1, 1.7);
  AdamState adam(AdamConfig{lr, b1, b2, eps});
  double x = 1.7, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    Vector g = Vector::Constant(1, c * p[0]);
    adam.step({{"p", as_span(p)}}, {{"p", as_span(g)}});
    const double gx = c * x;
    m = b1 * m + (1 - b1) * gx;
    v = b2 * v + (1 - b2) * gx * gx;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    x -= lr * mh / (std::sqrt(vh) + eps);
    EXPECT_NEAR(p[0], x, 1e-12) << "step " << t;
  }
}

TEST(Adam, NonFiniteGradientNamesBlock) {
  Vector p = Vector::Zero(2);
  Vector g(2);
  g << 1.0, std::numeric_limits<double>::quiet_NaN();
  AdamState adam;
  try {
    adam.step({{"policy.W0", as_span(p)}}, {{"policy.W0", as_span(g)}});
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("policy.W0"), std::string::npos);
  }
}

TEST(FiniteDifference, QuadraticOnLinearNet) {
  DenseNet net = random_net({3, 2}, 8);
  Rng rng(2);
  Matrix x(3, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  auto loss = [&] { return 0.5 * forward(net, x).squaredNorm(); };
  // Analytic: dL/dW = Y X^T, dL/db = sum_cols Y.
  const Matrix y = forward(net, x);
  Matrix gw = y * x.transpose();
  Vector gb = y.rowwise().sum();
  const auto report = finite_difference_check(
      loss, net.blocks(), {{"W0", as_span(gw)}, {"b0", as_span(gb)}});
  EXPECT_LT(report.max_relative_error, 1e-8);
}

TEST(FiniteDifference, ConstantLossGivesZeroError) {
  DenseNet net = random_net({2, 3, 1}, 4);
  GradientBuffer zero(net);
  const auto report = finite_difference_check([] { return 3.0; }, net.blocks(), dmil::as_const(zero.blocks()));
  EXPECT_EQ(report.max_relative_error, 0.0);
}

TEST(FiniteDifference, RestoresParameters) {
  DenseNet net = random_net({2, 3, 1}, 4);
  const DenseNet copy = net;
  GradientBuffer zero(net);
  finite_difference_check([&] { return forward(net, Vector(Vector::Ones(2)))[0]; }, net.blocks(),
                          dmil::as_const(zero.blocks()));
  for (std::size_t k = 0; k < net.depth(); ++k) {
    EXPECT_EQ(net.layers()[k].weight, copy.layers()[k].weight);
    EXPECT_EQ(net.layers()[k].bias, copy.layers()[k].bias);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(17);
  ModelSet m;
  m.policy = GaussianPolicy::create(4, 1, {5, 5}, rng);
  m.policy.log_std()[0] = -0.3;
  m.policy.input_normalizer() = Normalizer::fit(Matrix(Matrix::Random(4, 10)));
  m.dynamics = DynamicsModel::create(4, 1, {6}, rng);
  m.dynamics.output_scale() = Vector::Constant(4, 0.01);
  m.disc_r = RolloutDiscriminator::create(4, 1, {3}, rng);
  std::stringstream buf;
  make_checkpoint(m).write(buf);
  const ModelSet back = model_set_from_checkpoint(Checkpoint::read(buf));
  EXPECT_EQ(back.policy.log_std(), m.policy.log_std());
  EXPECT_EQ(back.policy.input_normalizer().scale, m.policy.input_normalizer().scale);
  for (std::size_t k = 0; k < m.policy.net().depth(); ++k) {
    EXPECT_EQ(back.policy.net().layers()[k].weight, m.policy.net().layers()[k].weight);
  }
  EXPECT_EQ(back.dynamics.output_scale(), m.dynamics.output_scale());
  EXPECT_EQ(back.disc_r.net().layers()[0].weight, m.disc_r.net().layers()[0].weight);
  EXPECT_EQ(back.disc_o.net().depth(), 0u);
}

TEST(Checkpoint, RejectsGarbage) {
  std::stringstream buf("not a checkpoint at all");
  EXPECT_THROW(Checkpoint::read(buf), FormatError);
}

}  // namespace
}  // namespace dmil
