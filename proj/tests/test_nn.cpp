#include <gtest/gtest.h>

#include "dmg/nn.hpp"
#include "oracles.hpp"

using namespace dmg;

namespace {

std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

TEST(Mlp, ParameterLayoutAndShapes) {
  Mlp net({3, 4, 2}, Activation::relu);
  EXPECT_EQ(net.n_params(), 4u * 3 + 4 + 2 * 4 + 2);
  net.bias(1)(1) = 2.5;
  EXPECT_EQ(net.params()(4 * 3 + 4 + 2 * 4 + 1), 2.5);
  EXPECT_EQ(net.forward(Vec(Vec::Zero(3)))(1), 2.5);
  EXPECT_THROW(net.forward(Vec(Vec::Zero(2))), std::invalid_argument);
  EXPECT_THROW(Mlp({3}, Activation::relu), std::invalid_argument);
  EXPECT_THROW(Mlp({3, 0, 1}, Activation::relu), std::invalid_argument);
}

TEST(Mlp, BatchForwardMatchesColumnwise) {
  std::mt19937_64 rng(2);
  const Mlp net({3, 5, 5, 2}, Activation::relu, rng);
  Mat x = Mat::Random(3, 7);
  const Mat y = net.forward(x);
  for (Eigen::Index j = 0; j < x.cols(); ++j) EXPECT_TRUE(y.col(j).isApprox(net.forward(Vec(x.col(j))), 1e-15));
}

TEST(Mlp, BackwardMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    std::mt19937_64 rng(seed);
    Mlp net({4, 6, 5, 3}, Activation::softplus, rng);
    const Mat x = Mat::Random(4, 5);
    const Mat w = Mat::Random(3, 5);
    auto loss = [&](const Mlp& m) { return (m.forward(x).array() * w.array()).sum(); };
    Tape tape;
    net.forward(x, &tape);
    Vec grad = Vec::Zero(static_cast<Eigen::Index>(net.n_params()));
    const Mat dx = net.backward(tape, w, &grad);

    const Vec p0 = net.params();
    const auto fd = oracle::numeric_gradient(
        [&](const std::vector<double>& p) {
          Mlp m = net;
          m.set_params(Eigen::Map<const Vec>(p.data(), static_cast<Eigen::Index>(p.size())));
          return loss(m);
        },
        to_std(p0));
    EXPECT_LT(oracle::relative_error(to_std(grad), fd), 1e-7) << "seed " << seed;

    const Vec xv = Eigen::Map<const Vec>(x.data(), x.size());
    const auto fdx = oracle::numeric_gradient(
        [&](const std::vector<double>& p) {
          const Mat xp = Eigen::Map<const Mat>(p.data(), 4, 5);
          return (net.forward(xp).array() * w.array()).sum();
        },
        to_std(xv));
    EXPECT_LT(oracle::relative_error(to_std(Eigen::Map<const Vec>(dx.data(), dx.size())), fdx), 1e-7);
  }
}

TEST(Mlp, BackwardAccumulatesIntoGradient) {
  std::mt19937_64 rng(4);
  const Mlp net({2, 3, 1}, Activation::relu, rng);
  Tape tape;
  net.forward(Mat::Ones(2, 1), &tape);
  Vec once = Vec::Zero(static_cast<Eigen::Index>(net.n_params()));
  net.backward(tape, Mat::Ones(1, 1), &once);
  Vec twice = once;
  net.backward(tape, Mat::Ones(1, 1), &twice);
  EXPECT_TRUE(twice.isApprox(2.0 * once));
}

TEST(Adam, FirstStepMovesEachCoordinateByLr) {
  AdamState st(3, 0.1);
  Vec p = Vec::Zero(3);
  Vec g(3);
  g << 2.0, -0.5, 1e-3;
  adam_step(st, p, g);
  EXPECT_NEAR(p(0), -0.1, 1e-6);
  EXPECT_NEAR(p(1), 0.1, 1e-6);
  EXPECT_NEAR(p(2), -0.1, 1e-4);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, MinimizesQuadratic) {
  AdamState st(2, 0.05);
  Vec p(2);
  p << 3.0, -2.0;
  for (int i = 0; i < 2000; ++i) adam_step(st, p, 2.0 * (p - Vec::Constant(2, 0.5)));
  EXPECT_NEAR(p(0), 0.5, 1e-3);
  EXPECT_NEAR(p(1), 0.5, 1e-3);
  Vec wrong = Vec::Zero(3);
  EXPECT_THROW(adam_step(st, p, wrong), std::invalid_argument);
}

TEST(Polyak, EndpointsAndMixture) {
  Vec t = Vec::Constant(2, 1.0);
  const Vec o = Vec::Constant(2, 3.0);
  polyak_update(t, o, 0.0);
  EXPECT_EQ(t, Vec::Constant(2, 1.0));
  polyak_update(t, o, 0.25);
  EXPECT_EQ(t, Vec::Constant(2, 1.5));
  polyak_update(t, o, 1.0);
  EXPECT_EQ(t, o);
  EXPECT_THROW(polyak_update(t, o, 1.5), std::invalid_argument);
}

TEST(Expectile, LossValuesAndDerivative) {
  EXPECT_DOUBLE_EQ(expectile_loss(2.0, 0.7).value, 0.7 * 4.0);
  EXPECT_DOUBLE_EQ(expectile_loss(-2.0, 0.7).value, 0.3 * 4.0);
  EXPECT_DOUBLE_EQ(expectile_loss(-2.0, 0.7).derivative, 2.0 * 0.3 * -2.0);
  EXPECT_EQ(expectile_loss(0.0, 0.9).value, 0.0);
  EXPECT_THROW(expectile_loss(1.0, 1.0), std::invalid_argument);
  EXPECT_THROW(expectile_loss(1.0, 0.0), std::invalid_argument);
}

TEST(Probe, LinearNetHasNoResidual) {
  // A single linear layer: the first-order prediction is exact.
  std::mt19937_64 rng(1);
  Mlp net({3, 1}, Activation::softplus, rng);
  Vec s(1), a(2), at(2);
  s << 0.3;
  a << 0.1, -0.2;
  at << 0.12, -0.25;
  const auto r = generalization_probe(net, 1.0, s, a, at, 0.1);
  EXPECT_NEAR(r.residual, 0.0, 1e-14);
  EXPECT_NEAR(r.c1, 0.1 * (1.0 + 0.3 * 0.3 + a.dot(at)), 1e-14);
  EXPECT_FALSE(r.c2_term.has_value());
  const auto r2 = generalization_probe(net, 1.0, s, a, at, 0.1, 0.5);
  ASSERT_TRUE(r2.c2_term.has_value());
}

TEST(Probe, ResidualIsSecondOrderInStep) {
  const auto rep = run_probe_suite({});
  EXPECT_TRUE(rep.passed);
  EXPECT_GE(rep.min_ratio, 3.0);
  EXPECT_LE(rep.max_ratio, 5.0);
  EXPECT_EQ(rep.trials.size(), 20u);
}

TEST(Probe, RejectsReluNets) {
  Mlp net({2, 1}, Activation::relu);
  EXPECT_THROW(generalization_probe(net, 0.0, Vec::Zero(1), Vec::Zero(1), Vec::Zero(1), 0.1), std::invalid_argument);
}

TEST(Serialization, NetAndOptimizerRoundTrip) {
  std::mt19937_64 rng(3);
  const Mlp net({2, 4, 1}, Activation::softplus, rng);
  const Mlp back = mlp_from_json(nlohmann::json::parse(to_json(net).dump()));
  EXPECT_EQ(back.sizes(), net.sizes());
  EXPECT_EQ(back.params(), net.params());
  EXPECT_EQ(back.activation(), Activation::softplus);

  AdamState st(net.n_params(), 1e-3);
  Vec p = net.params();
  adam_step(st, p, Vec::Ones(p.size()));
  const AdamState st2 = adam_from_json(nlohmann::json::parse(to_json(st).dump()));
  EXPECT_EQ(st2.m, st.m);
  EXPECT_EQ(st2.v, st.v);
  EXPECT_EQ(st2.step, 1u);

  auto bad = nlohmann::json::parse(to_json(net).dump());
  bad["params"].erase(0);
  EXPECT_THROW(mlp_from_json(bad), std::runtime_error);
  bad = nlohmann::json::parse(to_json(net).dump());
  bad["activation"] = "tanh";
  EXPECT_ANY_THROW(mlp_from_json(bad));
}
