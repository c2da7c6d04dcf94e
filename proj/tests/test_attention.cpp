#include <gtest/gtest.h>

#include <cmath>

#include "attnlab/attention.hpp"

using namespace attnlab;

namespace {

// column-by-column reference: output column i = sum_{j<=i} w(j,i) v x_j
Mat reference_star(const Mat& x, const Mat& q, const Mat& k, const Mat& v) {
  const std::size_t d = x.rows(), m = x.cols();
  Mat out(d, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      double w = 0.0;
      for (std::size_t r = 0; r < q.rows(); ++r) {
        double kj = 0.0, qi = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          kj += k(r, c) * x(c, j);
          qi += q(r, c) * x(c, i);
        }
        w += kj * qi;
      }
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t c = 0; c < d; ++c) out(a, i) += w * v(a, c) * x(c, j);
    }
  return out;
}

BlockParams random_params(std::size_t d, Rng& rng) {
  BlockParams p;
  p.q = rng.normal_matrix(d, d, 0.5);
  p.k = rng.normal_matrix(d, d, 0.5);
  p.v = rng.normal_matrix(d, d, 0.5);
  return p;
}

}  // namespace

TEST(Attention, StarMatchesReference) {
  Rng rng(1);
  const auto e = encode_context(sample_context(4, 7, CategoryDist::uniform(4), rng));
  const auto p = random_params(11, rng);
  const auto out = attention_star(e, p);
  EXPECT_LT(max_abs_diff(out.attn_t, reference_star(e.X, p.q, p.k, p.v)), 1e-12);
  for (std::size_t j = 0; j < 7; ++j)
    for (std::size_t i = 0; i < j; ++i) EXPECT_EQ(out.weights(j, i), 0.0);
}

TEST(Attention, NonCausalKeepsEverything) {
  Rng rng(2);
  const auto e = encode_context(sample_context(3, 5, CategoryDist::uniform(3), rng));
  const auto p = random_params(8, rng);
  const auto out = attention_star(e, p, false);
  const Mat w = matmul_tn(matmul(p.k, e.X), matmul(p.q, e.X));
  EXPECT_LT(max_abs_diff(out.weights, w), 1e-12);
}

TEST(Attention, SoftmaxColumnsSumToOne) {
  Rng rng(3);
  const auto e = encode_context(sample_context(3, 6, CategoryDist::uniform(3), rng));
  auto p = random_params(9, rng);
  p.softmax = true;
  p.scale = 3.0;
  const auto out = attention(e, p);
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) s += out.weights(j, i);
    EXPECT_NEAR(s, 1.0, 1e-13);
  }
  // first query sees only itself
  EXPECT_NEAR(out.weights(0, 0), 1.0, 1e-15);
  const Mat expect_col0 = matmul(p.v, e.X).block(0, 0, 9, 1);
  EXPECT_LT(max_abs_diff(out.attn_t.block(0, 0, 9, 1), expect_col0), 1e-12);
}

TEST(Attention, AccessMasks) {
  Rng rng(4);
  const std::size_t n = 3, m = 4, d = n + m;
  auto p = random_params(d, rng);
  p.q_access = Access::positions;
  p.k_access = Access::positions;
  p.v_access = Access::categories;
  const Mat qe = p.q_eff(n), ve = p.v_eff(n);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < n; ++c) EXPECT_EQ(qe(r, c), 0.0);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c)
      if (r >= n || c >= n) {
        EXPECT_EQ(ve(r, c), 0.0);
      } else {
        EXPECT_EQ(ve(r, c), p.v(r, c));
      }
  // position-only scores do not depend on the tokens
  const auto a = encode_context(TokenSequence::from_one_based({1, 2, 3, 1}, n));
  const auto b = encode_context(TokenSequence::from_one_based({3, 3, 1, 2}, n));
  EXPECT_LT(max_abs_diff(attention(a, p).weights, attention(b, p).weights), 1e-14);
}

TEST(Attention, ShapeAndModeErrors) {
  Rng rng(5);
  const auto e = encode_context(sample_context(3, 4, CategoryDist::uniform(3), rng));
  auto p = random_params(6, rng);
  EXPECT_THROW(attention(e, p), ShapeError);
  p = random_params(7, rng);
  p.softmax = true;
  EXPECT_THROW(attention_star(e, p), ConfigError);
  p.scale = 0.0;
  EXPECT_THROW(attention_softmax(e, p), ConfigError);
}

TEST(Attention, SkipAddsScaledInput) {
  Rng rng(6);
  const auto e = encode_context(sample_context(3, 4, CategoryDist::uniform(3), rng));
  const auto p = random_params(7, rng);
  const auto out = attention(e, p);
  const Mat h = apply_skip(out, e, 2.0);
  EXPECT_LT(max_abs_diff(h - out.attn_t, e.X * 2.0), 1e-15);
}
