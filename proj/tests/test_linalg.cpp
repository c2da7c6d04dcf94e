#include <gtest/gtest.h>

#include <cmath>

#include "attnlab/linalg.hpp"

using namespace attnlab;

namespace {

Mat naive_product(const Mat& a, const Mat& b) {
  Mat c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST(Mat, ConstructionAndAccess) {
  Mat m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_EQ(m.transposed()(2, 1), 6.0);
  EXPECT_EQ(m.shape(), "2x3");
  EXPECT_THROW((Mat{{1, 2}, {3}}), ShapeError);
  EXPECT_THROW(Mat(2, 2, Vec{1, 2, 3}), ShapeError);
  EXPECT_THROW(Mat(1, 1, std::nan("")), NonFiniteError);
}

TEST(Mat, BlocksAndArithmetic) {
  Mat m(3, 3);
  m.set_block(1, 1, Mat{{1, 2}, {3, 4}});
  EXPECT_EQ(m(2, 2), 4.0);
  EXPECT_EQ(m.block(1, 1, 2, 2), (Mat{{1, 2}, {3, 4}}));
  EXPECT_THROW(m.block(2, 2, 2, 2), ShapeError);
  EXPECT_EQ((m + m)(1, 2), 4.0);
  EXPECT_EQ((m * 3.0)(2, 1), 9.0);
  EXPECT_EQ(m.sum(), 10.0);
  EXPECT_EQ(m.hadamard(m)(2, 2), 16.0);
  EXPECT_THROW(m + Mat(2, 2), ShapeError);
}

TEST(Matmul, MatchesNaiveLoops) {
  Rng rng(3);
  const Mat a = rng.normal_matrix(7, 5, 1.0), b = rng.normal_matrix(5, 9, 1.0);
  EXPECT_LT(max_abs_diff(matmul(a, b), naive_product(a, b)), 1e-12);
  EXPECT_LT(max_abs_diff(matmul_tn(a.transposed(), b), naive_product(a, b)), 1e-12);
  EXPECT_LT(max_abs_diff(matmul_nt(a, b.transposed()), naive_product(a, b)), 1e-12);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Matmul, GemmIntoAccumulates) {
  Rng rng(4);
  const Mat a = rng.normal_matrix(4, 3, 1.0), b = rng.normal_matrix(3, 2, 1.0);
  Mat c(4, 2, 1.0);
  detail::gemm_into(c, a, false, b, false, true);
  Mat expect = naive_product(a, b);
  for (double& x : expect.data()) x += 1.0;
  EXPECT_LT(max_abs_diff(c, expect), 1e-12);
  Mat d(2, 4);
  detail::gemm_into(d, b, true, a, true, false);
  EXPECT_LT(max_abs_diff(d, naive_product(a, b).transposed()), 1e-12);
}

TEST(Shift, RightAndDownAreTransposes) {
  const Mat r = shift_right(5), d = shift_down(5);
  EXPECT_EQ(r, d.transposed());
  EXPECT_EQ(r(0, 1), 1.0);
  EXPECT_EQ(d(1, 0), 1.0);
  EXPECT_EQ(r.sum(), 4.0);
  // X * D_-1 moves column j to column j + 1
  Mat x{{1, 2, 3, 4, 5}};
  EXPECT_EQ(matmul(x, r), (Mat{{0, 1, 2, 3, 4}}));
}

TEST(Nonlinear, ReluBias) {
  Mat m{{1, -2}, {0.5, 3}};
  EXPECT_EQ(relu_bias(m, Vec{-1, 1}), (Mat{{0, 0}, {1.5, 4}}));
  EXPECT_THROW(relu_bias(m, Vec{1}), ShapeError);
}

TEST(Nonlinear, CausalSoftmaxColumns) {
  Rng rng(5);
  const Mat s = rng.normal_matrix(6, 6, 2.0);
  const Mat w = softmax_causal_columns(s);
  for (std::size_t i = 0; i < 6; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) z += std::exp(s(j, i));
    double total = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      if (j > i) {
        EXPECT_EQ(w(j, i), 0.0);
      } else {
        EXPECT_NEAR(w(j, i), std::exp(s(j, i)) / z, 1e-14);
      }
      total += w(j, i);
    }
    EXPECT_NEAR(total, 1.0, 1e-14);
  }
}

TEST(Nonlinear, LayerNorm) {
  const Vec x{1.0, 2.0, 3.0, 6.0};
  const Vec y = layer_norm(x, 0.0);
  double mean = 0.0, var = 0.0;
  for (double v : y) mean += v / 4.0;
  for (double v : y) var += (v - mean) * (v - mean) / 4.0;
  EXPECT_NEAR(mean, 0.0, 1e-14);
  EXPECT_NEAR(var, 1.0, 1e-12);
  const Vec g = layer_norm(x, 0.0, Vec{2, 2, 2, 2}, Vec{1, 1, 1, 1});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g[i], 2.0 * y[i] + 1.0, 1e-14);
}

TEST(Rng, SeededAndSplitStreamsAreReproducible) {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  const Rng root(9);
  Rng s1 = root.split(3), s2 = root.split(3), s3 = root.split(4);
  EXPECT_EQ(s1.next_u64(), s2.next_u64());
  EXPECT_NE(root.split(3).next_u64(), s3.next_u64());
}

TEST(Rng, CategoricalFrequencies) {
  Rng rng(11);
  const Vec p{0.1, 0.2, 0.7};
  std::vector<int> counts(3, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++counts[rng.categorical(p)];
  for (int k = 0; k < 3; ++k) {
    const double se = std::sqrt(p[k] * (1 - p[k]) / n);
    EXPECT_NEAR(counts[k] / double(n), p[k], 5 * se);
  }
}
