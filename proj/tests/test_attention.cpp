#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cad/attention.hpp"
#include "test_util.hpp"

namespace cad {
namespace {

TEST(Project, IdentityProjectionAndSharedNode) {
  Tape t;
  const Matrix xa{{1, 2}, {3, 4}, {5, 6}};
  Projections p = project(t.constant(xa), t.constant(Matrix(3, 2, 1.0)),
                          {t.variable(Matrix::identity(2)), t.variable(Matrix(2, 3, 0.5))});
  EXPECT_EQ(p.query.value(), xa);
  EXPECT_EQ(p.query, p.key);  // one node, not a copy
  EXPECT_EQ(p.value.value(), Matrix(3, 3, 1.0));
}

TEST(Project, ShapeContract) {
  std::mt19937_64 rng(1);
  Tape t;
  Projections p = project(t.constant(test::random_matrix(3, 4, rng)),
                          t.constant(test::random_matrix(3, 4, rng)),
                          {t.variable(test::random_matrix(4, 5, rng)),
                           t.variable(test::random_matrix(4, 6, rng))});
  EXPECT_EQ(p.query.value().shape(), "3x5");
  EXPECT_EQ(p.key.value().shape(), "3x5");
  EXPECT_EQ(p.value.value().shape(), "3x6");
  EXPECT_THROW(project(t.constant(Matrix(3, 3)), t.constant(Matrix(3, 4)),
                       {t.variable(Matrix(4, 5)), t.variable(Matrix(4, 6))}),
               DimensionError);
  EXPECT_THROW(project(t.constant(Matrix(3, 4)), t.constant(Matrix(2, 4)),
                       {t.variable(Matrix(4, 5)), t.variable(Matrix(4, 6))}),
               DimensionError);
}

TEST(MultimodalAttention, ZeroTextGivesZeroOutput) {
  std::mt19937_64 rng(2);
  Tape t;
  AttentionOutput out = multimodal_attention(
      t.constant(test::random_matrix(4, 3, rng)), t.constant(Matrix(4, 5)),
      {t.constant(test::random_matrix(3, 2, rng)), t.constant(test::random_matrix(5, 2, rng))});
  EXPECT_EQ(out.values.value(), Matrix(4, 2));
  EXPECT_EQ(out.fused.value(), Matrix(4, 2));
}

TEST(MultimodalAttention, SingleSegment) {
  std::mt19937_64 rng(3);
  Tape t;
  AttentionOutput out = multimodal_attention(
      t.constant(test::random_matrix(1, 3, rng)), t.constant(test::random_matrix(1, 4, rng)),
      {t.constant(test::random_matrix(3, 2, rng)), t.constant(test::random_matrix(4, 2, rng))});
  EXPECT_EQ(out.scores.value(), (Matrix{{1.0}}));
  EXPECT_EQ(out.fused.value(), out.values.value());
}

TEST(MultimodalAttention, IdenticalAcousticRowsGiveUniformScores) {
  std::mt19937_64 rng(4);
  Tape t;
  Matrix xa(4, 3);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) xa(i, j) = 0.3 * double(j) - 0.4;
  AttentionOutput out = multimodal_attention(
      t.constant(xa), t.constant(test::random_matrix(4, 5, rng)),
      {t.constant(test::random_matrix(3, 2, rng)), t.constant(test::random_matrix(5, 3, rng))});
  const Matrix& v = out.values.value();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.scores.value()(i, j), 0.25, 1e-15);
    for (std::size_t c = 0; c < 3; ++c) {
      const double mean = (v(0, c) + v(1, c) + v(2, c) + v(3, c)) / 4.0;
      EXPECT_NEAR(out.fused.value()(i, c), mean, 1e-14);
    }
  }
}

TEST(MultimodalAttention, HandSoftmaxExample) {
  // Q = K = diag(2, 2), d_q = 2: logits diag 4/sqrt(2), off-diagonal 0.
  Tape t;
  AttentionOutput out =
      multimodal_attention(t.constant({{2, 0}, {0, 2}}), t.constant(Matrix::identity(2)),
                           {t.constant(Matrix::identity(2)), t.constant(Matrix::identity(2))});
  const double hi = 1.0 / (1.0 + std::exp(-4.0 / std::sqrt(2.0)));
  EXPECT_NEAR(hi, 0.9442, 5e-5);
  const Matrix expected{{hi, 1 - hi}, {1 - hi, hi}};
  EXPECT_LT(max_abs_diff(out.scores.value(), expected), 1e-15);
  EXPECT_LT(max_abs_diff(out.fused.value(), out.scores.value()), 1e-15);
}

TEST(MultimodalAttention, MaskedKeysGetNoMass) {
  std::mt19937_64 rng(5);
  Tape t;
  const Mask mask = Mask::prefix(3, 5);
  AttentionOutput out = multimodal_attention(
      t.constant(test::random_matrix(5, 3, rng)), t.constant(test::random_matrix(5, 3, rng)),
      {t.constant(test::random_matrix(3, 2, rng)), t.constant(test::random_matrix(3, 2, rng))},
      &mask);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(out.scores.value()(i, 3), 0.0);
    EXPECT_EQ(out.scores.value()(i, 4), 0.0);
  }
}

TEST(SelfAttention, SingleRowAndIdenticalRows) {
  std::mt19937_64 rng(6);
  Tape t;
  const Matrix proj = test::random_matrix(3, 2, rng);
  const Matrix x1 = test::random_matrix(1, 3, rng);
  EXPECT_EQ(self_attention(t.constant(x1), t.constant(proj)).value(), multiply(x1, proj));

  Matrix same(4, 3);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) same(i, j) = x1(0, j);
  const Matrix out = self_attention(t.constant(same), t.constant(proj)).value();
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(out(i, j), out(0, j));
}

TEST(SelfAttention, MatchesMultimodalWithSharedInputs) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tape t;
    const Matrix x = test::random_matrix(6, 4, rng);
    const Matrix w = test::random_matrix(4, 3, rng);
    const Matrix a = self_attention(t.constant(x), t.constant(w)).value();
    const Matrix b =
        multimodal_attention(t.constant(x), t.constant(x), {t.constant(w), t.constant(w)})
            .fused.value();
    EXPECT_EQ(a, b);
  }
}

TEST(Regularizer, Examples) {
  Tape t;
  const std::vector<Label> same{Label::Student, Label::Student, Label::Student};
  EXPECT_EQ(attention_regularizer(t.constant(Matrix(3, 3, 1.0 / 3)), same).value()(0, 0), 0.0);

  const std::vector<Label> mixed{Label::Teacher, Label::Student};
  EXPECT_EQ(attention_regularizer(t.constant(Matrix(2, 2, 0.5)), mixed).value()(0, 0), 1.0);

  // Direct summation: off-type entries are (0,1) and (1,0): 0.1 + 0.3.
  EXPECT_NEAR(attention_regularizer(t.constant({{0.9, 0.1}, {0.3, 0.7}}), mixed).value()(0, 0),
              0.4, 1e-15);

  EXPECT_THROW(attention_regularizer(t.constant(Matrix(3, 3)), mixed), DimensionError);
}

TEST(Regularizer, BoundsProperty) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 12;
    const std::size_t valid = 1 + trial % n;
    const Mask mask = Mask::prefix(valid, n);
    Tape t;
    AttentionOutput out = multimodal_attention(
        t.constant(test::random_matrix(n, 3, rng, 3.0)), t.constant(test::random_matrix(n, 2, rng)),
        {t.constant(test::random_matrix(3, 3, rng)), t.constant(test::random_matrix(2, 2, rng))},
        &mask);
    const auto labels = test::random_labels(n, rng, 0.5);
    const double r = attention_regularizer(out.scores, labels, &mask).value()(0, 0);
    EXPECT_GE(r, 0.0);
    EXPECT_LE(r, double(valid) + 1e-12);
  }
}

TEST(Attention, PermutationEquivariance) {
  std::mt19937_64 rng(9);
  const std::size_t n = 7;
  const Matrix xa = test::random_matrix(n, 4, rng), xt = test::random_matrix(n, 3, rng);
  const Matrix wa = test::random_matrix(4, 3, rng), wt = test::random_matrix(3, 2, rng);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix pa(n, 4), pt(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < 4; ++j) pa(i, j) = xa(perm[i], j);
    for (std::size_t j = 0; j < 3; ++j) pt(i, j) = xt(perm[i], j);
  }
  Tape t;
  const Matrix base =
      multimodal_attention(t.constant(xa), t.constant(xt), {t.constant(wa), t.constant(wt)})
          .fused.value();
  const Matrix permuted =
      multimodal_attention(t.constant(pa), t.constant(pt), {t.constant(wa), t.constant(wt)})
          .fused.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(permuted(i, j), base(perm[i], j), 1e-13);
}

TEST(Attention, ScalingPreservesRowStochasticityAndConvexHull) {
  std::mt19937_64 rng(10);
  const Matrix xa = test::random_matrix(5, 4, rng), xt = test::random_matrix(5, 3, rng);
  const Matrix wa = test::random_matrix(4, 3, rng), wt = test::random_matrix(3, 2, rng);
  for (double c : {0.1, 1.0, 7.5}) {
    Matrix scaled = xa;
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= c;
    Tape t;
    AttentionOutput out =
        multimodal_attention(t.constant(scaled), t.constant(xt), {t.constant(wa), t.constant(wt)});
    const Matrix& a = out.scores.value();
    const Matrix& v = out.values.value();
    for (std::size_t i = 0; i < 5; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_GE(a(i, j), 0.0);
        total += a(i, j);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
      // fused row i is the convex combination of value rows with weights a(i, .)
      for (std::size_t col = 0; col < 2; ++col) {
        double combo = 0.0, lo = v(0, col), hi = v(0, col);
        for (std::size_t j = 0; j < 5; ++j) {
          combo += a(i, j) * v(j, col);
          lo = std::min(lo, v(j, col));
          hi = std::max(hi, v(j, col));
        }
        EXPECT_NEAR(out.fused.value()(i, col), combo, 1e-13);
        EXPECT_GE(out.fused.value()(i, col), lo - 1e-13);
        EXPECT_LE(out.fused.value()(i, col), hi + 1e-13);
      }
    }
  }
}

TEST(Regularizer, GradientWrtLogitsMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const auto labels = test::random_labels(6, rng, 0.5);
  const Mask mask = Mask::prefix(5, 6);
  ParameterStore ps;
  ps.add("logits", test::random_matrix(6, 6, rng));
  auto report = grad_check(
      [&](Tape&, const BoundParameters& p) {
        return attention_regularizer(row_softmax(p["logits"], &mask), labels, &mask);
      },
      ps, 1e-5, 1e-4);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(Attention, LayerGradientCheck) {
  std::mt19937_64 rng(12);
  const Matrix xa = test::random_matrix(5, 4, rng), xt = test::random_matrix(5, 3, rng);
  const Matrix weights = test::random_matrix(5, 2, rng);
  const auto labels = test::random_labels(5, rng, 0.5);
  ParameterStore ps;
  ps.add("w_a", test::random_matrix(4, 2, rng));
  ps.add("w_t", test::random_matrix(3, 2, rng));
  auto report = grad_check(
      [&](Tape& t, const BoundParameters& p) {
        AttentionOutput out =
            multimodal_attention(t.constant(xa), t.constant(xt), {p["w_a"], p["w_t"]});
        return add(weighted_sum(out.fused, weights), attention_regularizer(out.scores, labels));
      },
      ps, 1e-5, 1e-4);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
}

}  // namespace
}  // namespace cad
