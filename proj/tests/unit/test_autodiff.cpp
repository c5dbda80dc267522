#include <gtest/gtest.h>

#include "gradcorr/autodiff.hpp"
#include "gradcorr/error.hpp"
#include "oracles.hpp"

using namespace gradcorr;
using ad::Var;

TEST(Oracles, EveryOpMatchesCentralDifferences) {
  for (const auto& r : oracle::run_op_oracles(11, 20)) {
    EXPECT_EQ(r.instances, 20) << r.name;
    EXPECT_LT(r.worst, r.tolerance) << r.name;
  }
}

TEST(Oracles, RelativeErrorIsScaleFree) {
  EXPECT_DOUBLE_EQ(oracle::relative_error({1.0, 0.0}, {1.0, 0.0}), 0.0);
  EXPECT_NEAR(oracle::relative_error({2.0}, {1.0}), 0.5, 1e-15);
  EXPECT_NEAR(oracle::relative_error({2e6}, {1e6}), 0.5, 1e-15);
}

TEST(Grad, UnrelatedInputsGetZeros) {
  Var a(Tensor({2}, 1.0), true), b(Tensor({3}, 2.0), true);
  const auto g = ad::grad(ad::sum(ad::mul(a, a)), std::vector<Var>{a, b});
  EXPECT_EQ(g[0].value(), Tensor({2}, std::vector<double>{2.0, 2.0}));
  EXPECT_EQ(g[1].value(), Tensor({3}, 0.0));
}

TEST(Grad, CreateGraphGivesDifferentiableGradient) {
  // d/dx (d/dx x^3)^2 = d/dx 9x^4 = 36 x^3
  Var x(Tensor({1}, 0.5), true);
  const Var cube = ad::mul(ad::mul(x, x), x);
  const auto g1 = ad::grad(ad::sum(cube), std::vector<Var>{x}, true);
  const auto g2 = ad::grad(ad::sum(ad::mul(g1[0], g1[0])), std::vector<Var>{x});
  EXPECT_NEAR(g2[0].value()[0], 36.0 * 0.125, 1e-12);
}

TEST(Grad, NoGradGuardRecordsConstants) {
  Var x(Tensor({2}, 1.0), true);
  Var y;
  {
    ad::NoGradGuard guard;
    EXPECT_FALSE(ad::grad_enabled());
    y = ad::mul(x, x);
  }
  EXPECT_TRUE(ad::grad_enabled());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Grad, MutableValueOnlyOnLeaves) {
  Var x(Tensor({2}, 1.0), true);
  EXPECT_NO_THROW(x.mutable_value()[0] = 3.0);
  Var y = ad::add(x, x);
  EXPECT_THROW(y.mutable_value(), Error);
}

TEST(Shapes, MismatchIsADimensionError) {
  Var a(Tensor({2, 3}, 1.0)), b(Tensor({3, 2}, 1.0));
  EXPECT_THROW(ad::add(a, b), DimensionError);
  EXPECT_THROW(ad::matmul(a, a), DimensionError);
  EXPECT_THROW(ad::conv2d(Var(Tensor({1, 2, 4, 4})), Var(Tensor({1, 3, 3, 3})), 1, 0), DimensionError);
}

TEST(Ops, ConvMatchesHandComputation) {
  // 1x1x3x3 input, 1x1x2x2 kernel of ones: each output sums a 2x2 window.
  Tensor in({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  const auto out = ad::conv2d(Var(in), Var(Tensor({1, 1, 2, 2}, 1.0)), 1, 0).value();
  EXPECT_EQ(out, Tensor({1, 1, 2, 2}, std::vector<double>{12, 16, 24, 28}));
}

TEST(Ops, MaxpoolRoutesGradientToWinner) {
  Var x(Tensor({1, 1, 2, 2}, std::vector<double>{1, 4, 3, 2}), true);
  const auto g = ad::grad(ad::sum(ad::maxpool2d(x, 2, 2)), std::vector<Var>{x});
  EXPECT_EQ(g[0].value(), Tensor({1, 1, 2, 2}, std::vector<double>{0, 1, 0, 0}));
}

TEST(Ops, TapAddsNoiseButPassesGradientThrough) {
  Var x(Tensor({2}, 1.0), false);
  const Tensor noise({2}, std::vector<double>{0.5, -0.5});
  const Var t = ad::tap(x, &noise);
  EXPECT_TRUE(t.requires_grad());
  EXPECT_EQ(t.value(), Tensor({2}, std::vector<double>{1.5, 0.5}));
  const auto g = ad::grad(ad::sum(ad::mul(t, t)), std::vector<Var>{t});
  EXPECT_EQ(g[0].value(), Tensor({2}, std::vector<double>{3.0, 1.0}));
}

TEST(Ops, CrossEntropyOfUniformLogits) {
  const std::vector<int> labels{0, 1};
  const auto ce = ad::softmax_cross_entropy(Var(Tensor({2, 4}, 0.0)), labels);
  EXPECT_NEAR(ce.loss.value().item(), std::log(4.0), 1e-15);
  EXPECT_NEAR(ce.probabilities[0], 0.25, 1e-15);
}
