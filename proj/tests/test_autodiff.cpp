#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cad/autodiff.hpp"
#include "test_util.hpp"

namespace cad {
namespace {

TEST(Matmul, IdentityAndAnnihilator) {
  Tape t;
  const Matrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(matmul(t.constant(Matrix::identity(2)), t.constant(m)).value(), m);
  EXPECT_EQ(matmul(t.constant(Matrix(2, 2)), t.constant(m)).value(), Matrix(2, 3));
}

TEST(Matmul, HandExpansion) {
  Tape t;
  // 1*5 + 2*6 = 17, 3*5 + 4*6 = 39
  Var r = matmul(t.constant({{1, 2}, {3, 4}}), t.constant({{5}, {6}}));
  EXPECT_EQ(r.value(), (Matrix{{17}, {39}}));
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  Tape t;
  try {
    matmul(t.constant(Matrix(2, 3)), t.constant(Matrix(2, 3)));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("2x3 x 2x3"), std::string::npos) << e.what();
  }
}

TEST(Matmul, AssociativityOnRandomInputs) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix a = test::random_matrix(4, 4, rng), b = test::random_matrix(4, 4, rng),
                 c = test::random_matrix(4, 4, rng);
    EXPECT_LT(max_abs_diff(multiply(multiply(a, b), c), multiply(a, multiply(b, c))), 1e-10);
  }
}

TEST(RowSoftmax, AnalyticRows) {
  Tape t;
  Var s = row_softmax(t.constant({{0, 0}, {std::log(2.0), 0}}));
  EXPECT_DOUBLE_EQ(s.value()(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(s.value()(0, 1), 0.5);
  EXPECT_NEAR(s.value()(1, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(s.value()(1, 1), 1.0 / 3.0, 1e-15);
}

TEST(RowSoftmax, MaskedMiddle) {
  Tape t;
  const Mask mask(std::vector<bool>{true, false, true});
  Var s = row_softmax(t.constant({{5, 100, 3}}), &mask);
  // Oracle: exp-normalize over the unmasked entries only.
  const double e5 = std::exp(5.0), e3 = std::exp(3.0);
  EXPECT_NEAR(s.value()(0, 0), e5 / (e5 + e3), 1e-15);
  EXPECT_EQ(s.value()(0, 1), 0.0);
  EXPECT_NEAR(s.value()(0, 2), e3 / (e5 + e3), 1e-15);
  EXPECT_NEAR(s.value()(0, 0), 0.8808, 5e-5);
  EXPECT_NEAR(s.value()(0, 2), 0.1192, 5e-5);
}

TEST(RowSoftmax, DegenerateMaskRejected) {
  Tape t;
  const Mask none(std::vector<bool>{false, false});
  EXPECT_THROW(row_softmax(t.constant({{1, 2}}), &none), ContractError);
  const Mask wrong = Mask::all(3);
  EXPECT_THROW(row_softmax(t.constant({{1, 2}}), &wrong), DimensionError);
}

TEST(RowSoftmax, MaskedPositionsGetZeroGradient) {
  Tape t;
  const Mask mask(std::vector<bool>{true, true, false, true});
  Var x = t.variable({{0.3, -1.0, 2.0, 0.5}, {1.0, 0.0, -3.0, 0.2}});
  Var s = row_softmax(x, &mask);
  Var l = weighted_sum(s, Matrix{{1, 2, 3, 4}, {-1, 0.5, 7, 2}});
  t.backward(l);
  const Matrix g = x.grad();
  EXPECT_EQ(g(0, 2), 0.0);
  EXPECT_EQ(g(1, 2), 0.0);
  EXPECT_NE(g(0, 0), 0.0);
}

TEST(RowSoftmax, RowsSumToOneProperty) {
  std::mt19937_64 rng(17);
  std::bernoulli_distribution coin(0.6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 9;
    std::vector<bool> valid(n);
    for (std::size_t j = 0; j < n; ++j) valid[j] = coin(rng);
    valid[trial % n] = true;
    const Mask mask(valid);
    Tape t;
    Var s = row_softmax(t.constant(test::random_matrix(5, n, rng, 20.0)), &mask);
    for (std::size_t i = 0; i < 5; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += s.value()(i, j);
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(ConcatCols, ValuesAndGradientSplit) {
  Tape t;
  EXPECT_EQ(concat_cols(t.constant({{1}}), t.constant({{2}})).value(), (Matrix{{1, 2}}));

  const Matrix m{{1, 2}, {3, 4}};
  Var c = concat_cols(t.constant(m), t.constant(Matrix(2, 3)));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(c.value()(i, j), m(i, j));

  EXPECT_THROW(concat_cols(t.constant(Matrix(2, 1)), t.constant(Matrix(3, 1))), DimensionError);

  Tape g;
  Var a = g.variable({{0.5, -1.0}, {2.0, 3.0}});
  Var b = g.variable({{7.0}, {8.0}});
  g.backward(sum(concat_cols(a, b)));
  EXPECT_EQ(a.grad(), Matrix(2, 2, 1.0));
  EXPECT_EQ(b.grad(), Matrix(2, 1, 1.0));
}

TEST(ConcatCols, SumGradientMatchesFiniteDifferences) {
  ParameterStore ps;
  std::mt19937_64 rng(5);
  ps.add("a", test::random_matrix(3, 2, rng));
  ps.add("b", test::random_matrix(3, 4, rng));
  auto report = grad_check(
      [](Tape&, const BoundParameters& p) { return sum(concat_cols(p["a"], p["b"])); }, ps, 1e-5,
      1e-8);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(Elementwise, Values) {
  Tape t;
  EXPECT_EQ(elementwise(ElementwiseOp::Relu, t.constant({{-1, 0, 2}})).value(),
            (Matrix{{0, 0, 2}}));
  EXPECT_EQ(elementwise(ElementwiseOp::Sigmoid, t.constant({{0}})).value()(0, 0), 0.5);
  EXPECT_EQ(elementwise(ElementwiseOp::Tanh, t.constant({{0}})).value()(0, 0), 0.0);
  EXPECT_EQ(elementwise(ElementwiseOp::Add, t.constant({{1, 2}}), t.constant({{3, 4}})).value(),
            (Matrix{{4, 6}}));
  EXPECT_EQ(elementwise(ElementwiseOp::Mul, t.constant({{1, 2}}), t.constant({{3, 4}})).value(),
            (Matrix{{3, 8}}));
  EXPECT_THROW(add(t.constant(Matrix(1, 2)), t.constant(Matrix(2, 1))), DimensionError);
  EXPECT_THROW(mul(t.constant(Matrix(1, 2)), t.constant(Matrix(1, 3))), DimensionError);
  EXPECT_THROW(elementwise(ElementwiseOp::Add, t.constant(Matrix(1, 1))), ContractError);
}

TEST(Elementwise, SigmoidDerivativeAtZero) {
  Tape t;
  Var x = t.variable({{0.0}});
  t.backward(sigmoid(x));
  const double analytic = x.grad()(0, 0);
  EXPECT_EQ(analytic, 0.25);
  const double h = 1e-5;
  const double central = (sigmoid_scalar(h) - sigmoid_scalar(-h)) / (2 * h);
  EXPECT_LT(std::abs(analytic - central) / analytic, 1e-8);
}

TEST(Backward, SumOfSquares) {
  Tape t;
  const Matrix xv{{1.5, -2.0, 0.25}};
  Var x = t.variable(xv);
  t.backward(sum(mul(x, x)));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(x.grad()(0, j), 2 * xv(0, j));
}

TEST(Backward, SharedInputAccumulates) {
  Tape t;
  Var x = t.variable({{3.0}});
  t.backward(add(x, x));
  EXPECT_EQ(x.grad()(0, 0), 2.0);
}

TEST(Backward, NonScalarOutputRejected) {
  Tape t;
  Var x = t.variable(Matrix(2, 2, 1.0));
  EXPECT_THROW(t.backward(x), ContractError);
}

TEST(Backward, SecondCallRejectedUntilZeroed) {
  Tape t;
  Var x = t.variable({{1.0, 2.0}});
  Var l = sum(mul(x, x));
  t.backward(l);
  const Matrix first = x.grad();
  EXPECT_THROW(t.backward(l), ContractError);
  EXPECT_EQ(x.grad(), first);  // not doubled
  t.zero_grad();
  t.backward(l);
  EXPECT_EQ(x.grad(), first);
}

TEST(Backward, ConstantsGetNoGradient) {
  Tape t;
  Var c = t.constant({{2.0}});
  Var x = t.variable({{3.0}});
  t.backward(mul(c, x));
  EXPECT_EQ(x.grad()(0, 0), 2.0);
  EXPECT_EQ(c.grad()(0, 0), 0.0);
}

TEST(Tape, NonFiniteValuesRejected) {
  Tape t;
  EXPECT_THROW(t.constant({{std::nan("")}}), NumericError);
  EXPECT_THROW(log_clamped(t.constant({{0.0}}), 0.0, 1.0), NumericError);
}

TEST(GradCheck, QuadraticForm) {
  ParameterStore ps;
  std::mt19937_64 rng(9);
  ps.add("x", test::random_matrix(4, 1, rng));
  const Matrix a = test::random_matrix(4, 4, rng);
  auto report = grad_check(
      [&](Tape& t, const BoundParameters& p) {
        Var x = p["x"];
        return matmul(transpose(x), matmul(t.constant(a), x));
      },
      ps, 1e-5, 1e-9);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  EXPECT_LT(report.max_rel_error, 1e-9);
  ASSERT_EQ(report.parameters.size(), 1u);
  EXPECT_EQ(report.parameters[0].name, "x");
}

TEST(GradCheck, ComposedGraphProperty) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    ParameterStore ps;
    ps.add("w", test::random_matrix(3, 4, rng));
    ps.add("b", test::random_matrix(1, 4, rng));
    ps.add("v", test::random_matrix(4, 2, rng));
    const Matrix x = test::random_matrix(5, 3, rng);
    const Matrix weights = test::random_matrix(5, 2, rng);
    auto report = grad_check(
        [&](Tape& t, const BoundParameters& p) {
          Var h = tanh(add_row_broadcast(matmul(t.constant(x), p["w"]), p["b"]));
          Var s = row_softmax(matmul(sigmoid(h), p["v"]));
          Var r = concat_cols(slice_cols(s, 1, 1), slice_cols(transpose(transpose(h)), 2, 1));
          Var tail = sum(relu(slice_row(h, 3)));
          return add(add(weighted_sum(s, weights), scale(sum(mul(r, r)), 0.3)), tail);
        },
        ps, 1e-5, 1e-4);
    EXPECT_TRUE(report.passed) << report.max_rel_error;
  }
}

TEST(GradCheck, NonFiniteLossAborts) {
  ParameterStore ps;
  ps.add("x", Matrix{{1.0}});
  auto f = [](Tape&, const BoundParameters& p) {
    return scale(p["x"], std::numeric_limits<double>::infinity());
  };
  EXPECT_THROW(grad_check(f, ps, 1e-5, 1e-4), NumericError);
}

TEST(GradCheck, ReportsPerParameterErrors) {
  ParameterStore ps;
  std::mt19937_64 rng(2);
  ps.add("a", test::random_matrix(2, 2, rng));
  ps.add("b", test::random_matrix(2, 2, rng));
  const Matrix before = ps.at("a");
  auto report = grad_check(
      [](Tape&, const BoundParameters& p) { return sum(mul(sigmoid(p["a"]), p["b"])); }, ps, 1e-5,
      1e-4);
  ASSERT_EQ(report.parameters.size(), 2u);
  EXPECT_EQ(report.parameters[1].name, "b");
  EXPECT_LT(report.parameters[0].max_rel_error, 1e-4);
  EXPECT_EQ(ps.at("a"), before);  // perturbations undone
}

}  // namespace
}  // namespace cad
