#include <gtest/gtest.h>

#include "qghc/grad_check.hpp"

namespace qghc {
namespace {

TEST(Backward, ReluSubgradient) {
  auto x = Var<double>::leaf(Tensor<double>({2}, std::vector<double>{-1, 2}));
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad(), Tensor<double>({2}, std::vector<double>{0, 1}));
}

TEST(Backward, MatmulGradIsOnesTimesBTransposed) {
  Rng r(1);
  auto a = Var<double>::leaf(uniform_tensor<double>({2, 3}, -1, 1, r));
  auto b = Var<double>::leaf(uniform_tensor<double>({3, 4}, -1, 1, r));
  backward(sum(matmul(a, b)));
  const auto expect = matmul(Tensor<double>::ones({2, 4}), transpose2d(b.value()));
  EXPECT_LT(max_abs_diff(a.grad(), expect), 1e-12);
}

TEST(Backward, PathsSum) {
  auto x = Var<double>::leaf(Tensor<double>::ones({3}));
  backward(sum(x + x));
  EXPECT_EQ(x.grad(), Tensor<double>({3}, 2.0));
}

TEST(Backward, NonScalarLossRejected) {
  auto x = Var<double>::leaf(Tensor<double>::ones({3}));
  EXPECT_THROW(backward(x + x), ShapeError);
}

TEST(Backward, UnreachedLeafHasZeroGradient) {
  auto x = Var<double>::leaf(Tensor<double>::ones({3}));
  auto y = Var<double>::leaf(Tensor<double>::ones({2}));
  backward(sum(x));
  EXPECT_FALSE(y.has_grad());
  EXPECT_EQ(y.grad(), Tensor<double>::zeros({2}));
}

TEST(Backward, GradientShapesMatchValues) {
  Rng r(3);
  auto w = Var<double>::leaf(uniform_tensor<double>({4, 2}, -1, 1, r));
  auto x = Var<double>::leaf(uniform_tensor<double>({3, 4}, -1, 1, r));
  backward(mean(tanh(matmul(x, w))));
  EXPECT_EQ(w.grad().shape(), w.shape());
  EXPECT_EQ(x.grad().shape(), x.shape());
}

TEST(Backward, Deterministic) {
  auto run = [] {
    Rng r(5);
    auto w = Var<double>::leaf(uniform_tensor<double>({6, 5}, -1, 1, r));
    auto x = Var<double>::constant(uniform_tensor<double>({4, 6}, -1, 1, r));
    backward(sum(sigmoid(matmul(x, w)) * tanh(matmul(x, w))));
    return w.grad();
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, NoGradGuardSkipsRecording) {
  auto x = Var<double>::leaf(Tensor<double>::ones({2}));
  Var<double> y;
  {
    NoGradGuard ng;
    y = x + x;
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE((x + x).requires_grad());
}

TEST(Backward, NonFiniteValueRaises) {
  auto x = Var<double>::leaf(Tensor<double>::scalar(1e308));
  EXPECT_THROW(x * x, NumericError);
}

TEST(FiniteDiff, QuadraticIsExact) {
  auto th = Var<double>::leaf(Tensor<double>::scalar(3.0));
  Rng r(1);
  auto rep = finite_diff_check([&] { return th * th; }, {{"theta", th}}, 1e-3, 1e-6, 1, r);
  ASSERT_EQ(rep.entries.size(), 1u);
  EXPECT_NEAR(rep.entries[0].analytic, 6.0, 1e-12);
  EXPECT_NEAR(rep.entries[0].numeric, 6.0, 1e-6);
  EXPECT_TRUE(rep.passed);
}

TEST(FiniteDiff, TwoLayerMlp) {
  Rng r(7);
  auto w1 = Var<double>::leaf(uniform_tensor<double>({5, 8}, -1, 1, r));
  auto w2 = Var<double>::leaf(uniform_tensor<double>({8, 3}, -1, 1, r));
  auto x = Var<double>::constant(uniform_tensor<double>({4, 5}, -1, 1, r));
  auto f = [&] { return sum(tanh(matmul(tanh(matmul(x, w1)), w2))); };
  auto rep = finite_diff_check(f, {{"w1", w1}, {"w2", w2}}, 1e-5, 1e-4, 10, r);
  EXPECT_EQ(rep.entries.size(), 20u);
  EXPECT_LT(rep.max_rel_err, 1e-4);
}

TEST(FiniteDiff, ConstantFunctionHasZeroGradients) {
  auto th = Var<double>::leaf(Tensor<double>::ones({3}));
  auto c = Var<double>::leaf(Tensor<double>::scalar(2.0));
  Rng r(1);
  auto rep = finite_diff_check([&] { return c * c; }, {{"theta", th}}, 1e-3, 1e-4, 3, r);
  for (const auto& e : rep.entries) {
    EXPECT_EQ(e.analytic, 0.0);
    EXPECT_EQ(e.numeric, 0.0);
  }
  EXPECT_TRUE(rep.passed);
}

TEST(FiniteDiff, RejectsBadEpsAndNonFinite) {
  auto th = Var<double>::leaf(Tensor<double>::scalar(1.0));
  Rng r(1);
  EXPECT_THROW(finite_diff_check([&] { return th; }, {{"t", th}}, 1e-7, 1e-4, 1, r), ConfigError);
  auto bad = [&]() -> Var<double> {
    if (th.value()[0] > 1.0) return Var<double>::constant(Tensor<double>::scalar(std::nan("")));
    return th * th;
  };
  try {
    finite_diff_check(bad, {{"t", th}}, 1e-3, 1e-4, 1, r);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("t[0]"), std::string::npos);
  }
}

TEST(Registry, DuplicateNamesAndCounts) {
  Registry<float> reg;
  reg.add_parameter("a", Tensor<float>::zeros({2, 3}), Role::qi_free);
  reg.add_buffer("b", Tensor<float>::zeros({4}));
  EXPECT_THROW(reg.add_parameter("a", Tensor<float>::zeros({1}), Role::qi_free), ConfigError);
  EXPECT_THROW(reg.add_buffer("b", Tensor<float>::zeros({1})), ConfigError);
  EXPECT_EQ(reg.parameter_count(), 6u);
}

}  // namespace
}  // namespace qghc
