#include <gtest/gtest.h>

#include <cmath>

#include "attnlab/solutions.hpp"

using namespace attnlab;

namespace {

double max_error_from_two(const Vec& pred, const Vec& y) {
  double e = 0.0;
  for (std::size_t i = 1; i < y.size(); ++i) e = std::max(e, std::abs(pred[i] - y[i]));
  return e;
}

QTrueTable shifted_table(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return sample_qtrue(n, QMode::nonnegative_shifted, rng);
}

}  // namespace

TEST(WorkedExample, EveryIntermediate) {
  const std::size_t n = 4, m = 4;
  const auto qt = pair_code_table(n);
  const auto t = TokenSequence::from_one_based({1, 3, 2, 2}, n);
  const auto e = encode_context(t);
  const auto p = build_solution1(qt, n, m, BVariant::corrected);
  const auto tr = trace_pipeline(p, e);

  const Mat x{{1, 0, 0, 0}, {0, 0, 1, 1}, {0, 1, 0, 0}, {0, 0, 0, 0},
              {1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}};
  EXPECT_EQ(e.X, x);

  // attention adds twice the previous token's one-hot
  const Mat skip{{1, 2, 0, 0}, {0, 0, 1, 3}, {0, 1, 2, 0}, {0, 0, 0, 0},
                 {1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}};
  EXPECT_LT(max_abs_diff(tr.skip, skip), 1e-12);

  // column 3 holds the pair (3, 2): the 12th detector in the order
  // (1,1) (2,2) (3,3) (4,4) (1,2) (1,3) (1,4) (2,1) (2,3) (2,4) (3,1) (3,2)
  ASSERT_EQ(tr.hidden.rows(), 28u);
  for (std::size_t r = 0; r < 28; ++r) EXPECT_NEAR(tr.hidden(r, 2), r == 11 ? 1.0 : 0.0, 1e-12) << "row " << r + 1;
  for (std::size_t r = 0; r < 28; ++r) EXPECT_NEAR(tr.hidden(r, 1), r == 5 ? 1.0 : 0.0, 1e-12) << "row " << r + 1;
  for (std::size_t r = 0; r < 28; ++r) EXPECT_EQ(tr.hidden(r, 0), 0.0);

  const Vec expect{0, 13, 32, 22};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(tr.y[i], expect[i], 1e-12);
}

TEST(Reconstruction, AllSolutionsExactOnRandomContexts) {
  const std::size_t n = 10, m = 50;
  const auto qt = shifted_table(n, 3);
  const auto s1 = build_solution1(qt, n, m, BVariant::corrected);
  const auto s2 = build_solution2(qt, n, m);
  const auto s3 = build_solution3(qt, n, m);
  const auto batch = sample_batch(n, m, CategoryDist::uniform(n), Rng(4), 200);
  double e1 = 0, e2 = 0, e3 = 0;
  for (const auto& t : batch) {
    const auto enc = encode_context(t);
    const Vec y = targets(t, qt);
    const Vec p1 = run_pipeline(s1, enc), p2 = run_pipeline(s2, enc), p3 = run_pipeline(s3, enc);
    e1 = std::max(e1, max_error_from_two(p1, y));
    e2 = std::max(e2, max_error_from_two(p2, y));
    e3 = std::max(e3, max_error_from_two(p3, y));
    EXPECT_EQ(p1[0], 0.0);
    EXPECT_EQ(p2[0], 0.0);
    EXPECT_EQ(p3[0], 0.0);
  }
  EXPECT_LT(e1, 1e-9);
  EXPECT_LT(e2, 1e-9);
  EXPECT_LT(e3, 1e-9);
}

TEST(Reconstruction, StandardNormalTableGoesThroughAffineMap) {
  const std::size_t n = 5, m = 12;
  Rng rng(6);
  const auto qt = sample_qtrue(n, QMode::standard_normal, rng);
  const auto s2 = build_solution2(qt, n, m), s3 = build_solution3(qt, n, m);
  EXPECT_NE(s2.affine_gain, 1.0);
  for (const auto& t : sample_batch(n, m, CategoryDist::uniform(n), Rng(7), 50)) {
    const auto enc = encode_context(t);
    const Vec y = targets(t, qt);
    EXPECT_LT(max_error_from_two(run_pipeline(s2, enc), y), 1e-9);
    EXPECT_LT(max_error_from_two(run_pipeline(s3, enc), y), 1e-9);
  }
}

TEST(Reconstruction, LinearDigitVariant) {
  const auto p = build_solution1_linear(10, 6);
  const auto t = TokenSequence::from_one_based({4, 8, 1, 10, 10, 3}, 10);
  const Vec y = run_pipeline(p, encode_context(t));
  // digits are categories minus one: 3 7 0 9 9 2
  const Vec expect{3, 37, 70, 9, 99, 92};
  for (std::size_t i = 1; i < 6; ++i) EXPECT_NEAR(y[i], expect[i], 1e-12);
  EXPECT_THROW(build_solution1_linear(9, 6), ConfigError);
}

TEST(Reconstruction, ZeroOutputRow) {
  auto p = build_solution3(shifted_table(4, 1), 4, 6);
  p.C = Mat(1, p.C.cols());
  Rng rng(1);
  const Vec y = run_pipeline(p, encode_context(sample_context(4, 6, CategoryDist::uniform(4), rng)));
  for (double v : y) EXPECT_EQ(v, 0.0);
}

TEST(ScaleBound, RejectsOutOfRangeTables) {
  QTrueTable bad{Mat{{1, 2}, {3, 150}}, QMode::nonnegative_shifted};
  EXPECT_THROW(build_solution2(bad, 2, 4), ScaleBoundError);
  EXPECT_THROW(build_solution3(bad, 2, 4), ScaleBoundError);
  QTrueTable neg{Mat{{1, -2}, {3, 4}}, QMode::nonnegative_shifted};
  EXPECT_THROW(build_solution3(neg, 2, 4), ScaleBoundError);
  EXPECT_THROW(check_equivalence_2_3(neg, Mat(2, 3)), ScaleBoundError);
  EXPECT_THROW(build_solution2(bad, 3, 4), ConfigError);
}

TEST(OriginalB, LeakOnRepeatedPairsOnly) {
  const std::size_t n = 10, m = 4;
  const auto qt = shifted_table(n, 9);
  const auto original = build_solution1(qt, n, m, BVariant::original);
  const auto fixed = build_solution1(qt, n, m, BVariant::corrected);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      const Vec col = pair_column(n, m, a, b);
      EXPECT_NEAR(fully_connected(fixed, col), qt(a, b), 1e-9);
      double leak = 0.0;
      if (a == b)
        for (std::size_t c = 0; c < n; ++c)
          if (c != a) leak += 2.0 * qt(a, c);
      EXPECT_NEAR(fully_connected(original, col) - qt(a, b), leak, 1e-9);
      if (a == b) {
        EXPECT_NEAR(leak, original_b_leak(qt, a), 1e-9);
      }
    }
}

TEST(OriginalB, PipelineDiffersExactlyOnRepeats) {
  const std::size_t n = 4, m = 5;
  const auto qt = pair_code_table(n);
  const auto original = build_solution1(qt, n, m, BVariant::original);
  const auto t = TokenSequence::from_one_based({2, 2, 1, 3, 3}, n);
  const Vec y = run_pipeline(original, encode_context(t)), target = targets(t, qt);
  EXPECT_NEAR(y[1] - target[1], original_b_leak(qt, 1), 1e-9);
  EXPECT_NEAR(y[2], target[2], 1e-9);
  EXPECT_NEAR(y[3], target[3], 1e-9);
  EXPECT_NEAR(y[4] - target[4], original_b_leak(qt, 2), 1e-9);
}

TEST(Equivalence, BothSidesMatchTargets) {
  const auto qt = pair_code_table(4);
  const auto enc = encode_context(TokenSequence::from_one_based({1, 3, 2, 2}, 4));
  const auto r = check_equivalence_2_3(qt, enc.categories());
  const Vec expect{0, 13, 32, 22};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(r.lhs[i], expect[i], 1e-12);
    EXPECT_NEAR(r.rhs[i], expect[i], 1e-12);
  }
}

TEST(Equivalence, RandomPairsAndZeroTable) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto qt = shifted_table(10, 100 + s);
    Rng rng(200 + s);
    const auto enc = encode_context(sample_context(10, 50, CategoryDist::uniform(10), rng));
    EXPECT_LT(check_equivalence_2_3(qt, enc.categories()).max_abs_diff, 1e-9);
  }
  const QTrueTable zero{Mat(3, 3), QMode::nonnegative_shifted};
  Rng rng(1);
  const auto r = check_equivalence_2_3(zero, encode_context(sample_context(3, 5, CategoryDist::uniform(3), rng)).categories());
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(r.lhs[i], 0.0);
    EXPECT_EQ(r.rhs[i], 0.0);
  }
}

TEST(Equivalence, TransposeIdentityOnRealMatrices) {
  Rng rng(12);
  for (int t = 0; t < 20; ++t) {
    const Mat x = rng.normal_matrix(6, 9, 1.0), a = rng.normal_matrix(6, 6, 1.0);
    EXPECT_LT(transpose_identity_gap(x, a), 1e-12);
  }
}

TEST(Gauge, ScalingFoldedTableAndOutputCancels) {
  const std::size_t n = 6, m = 10;
  const auto qt = shifted_table(n, 2);
  auto p = build_solution3(qt, n, m);
  auto g = p;
  const double c = 1.7;
  g.attn.v = g.attn.v * c;
  g.C = g.C * (1.0 / c);
  for (const auto& t : sample_batch(n, m, CategoryDist::uniform(n), Rng(5), 20)) {
    const auto enc = encode_context(t);
    EXPECT_LT(max_abs_diff(run_pipeline(p, enc), run_pipeline(g, enc)), 1e-12);
  }
}

TEST(PairOrder, RepeatsFirst) {
  const auto o = solution1_pair_order(3);
  ASSERT_EQ(o.size(), 9u);
  EXPECT_EQ(o[2], (std::pair<std::size_t, std::size_t>{2, 2}));
  EXPECT_EQ(o[3], (std::pair<std::size_t, std::size_t>{0, 1}));
  EXPECT_EQ(o[8], (std::pair<std::size_t, std::size_t>{2, 1}));
}
