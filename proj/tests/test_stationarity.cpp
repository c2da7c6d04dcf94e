#include <gtest/gtest.h>

#include <cmath>

#include "attnlab/stationarity.hpp"

using namespace attnlab;

namespace {

// Brute-force E[SSE] for case A, written independently of the library.
double caseA_loss(const Mat& q, const Mat& v) {
  const std::size_t n = v.rows(), m = q.rows();
  std::vector<int> c(m, 0);
  const double w = std::pow(1.0 / static_cast<double>(n), static_cast<double>(m));
  double total = 0.0;
  while (true) {
    for (std::size_t i = 1; i < m; ++i)
      for (std::size_t k = 0; k < n; ++k) {
        double pred = 0.0;
        for (std::size_t j = 0; j < m; ++j) pred += v(k, c[j]) * q(j, i);
        const double r = (c[i - 1] == static_cast<int>(k) ? 1.0 : 0.0) - pred;
        total += w * r * r;
      }
    std::size_t pos = 0;
    while (pos < m && ++c[pos] == static_cast<int>(n)) c[pos++] = 0;
    if (pos == m) break;
  }
  return total;
}

double caseB_loss(const Mat& v, const Mat& q, const Mat& qt, const Vec& p) {
  const std::size_t n = q.rows(), m = v.rows();
  std::vector<int> c(m, 0);
  double total = 0.0;
  while (true) {
    double w = 1.0;
    for (int x : c) w *= p[x];
    for (std::size_t i = 1; i < m; ++i) {
      double pred = 0.0;
      for (std::size_t j = 0; j <= i; ++j) pred += v(i, j) * q(c[j], c[i]);
      const double r = qt(c[i - 1], c[i]) - pred;
      total += w * r * r;
    }
    std::size_t pos = 0;
    while (pos < m && ++c[pos] == static_cast<int>(n)) c[pos++] = 0;
    if (pos == m) break;
  }
  return total;
}

template <class F>
Mat central_diff(Mat x, F&& f, double h = 1e-5) {
  Mat g(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x.data()[i];
    x.data()[i] = x0 + h;
    const double up = f(x);
    x.data()[i] = x0 - h;
    const double dn = f(x);
    x.data()[i] = x0;
    g.data()[i] = (up - dn) / (2 * h);
  }
  return g;
}

}  // namespace

TEST(CaseA, ClosedFormLossMatchesBruteForce) {
  Rng rng(1);
  const CaseAParams p{rng.normal_matrix(4, 4, 0.5), rng.normal_matrix(3, 3, 0.5)};
  EXPECT_NEAR(expected_sse_closed(p), caseA_loss(p.q, p.v), 1e-10);
  EXPECT_NEAR(enumerate_caseA_loss(p), caseA_loss(p.q, p.v), 1e-10);
}

TEST(CaseA, ClosedGradientsAreMinusHalfTheDerivative) {
  for (auto [n, m] : {std::pair<std::size_t, std::size_t>{2, 3}, {3, 4}, {2, 5}}) {
    Rng rng(10 * n + m);
    const CaseAParams p{rng.normal_matrix(m, m, 0.7), rng.normal_matrix(n, n, 0.7)};
    const Mat fq = central_diff(p.q, [&](const Mat& q) { return caseA_loss(q, p.v); });
    const Mat fv = central_diff(p.v, [&](const Mat& v) { return caseA_loss(p.q, v); });
    EXPECT_LT(max_abs_diff(grad_q_closed(p) * -2.0, fq), 1e-7);
    EXPECT_LT(max_abs_diff(grad_v_closed(p) * -2.0, fv), 1e-7);
    const auto e = enumerate_caseA(p);
    EXPECT_LT(max_abs_diff(grad_q_closed(p) * -2.0, e.g1), 1e-9);
    EXPECT_LT(max_abs_diff(grad_v_closed(p) * -2.0, e.g2), 1e-9);
  }
}

TEST(CaseA, MonteCarloWithinStandardErrors) {
  Rng rng(3);
  const CaseAParams p{rng.normal_matrix(5, 5, 0.5), rng.normal_matrix(3, 3, 0.5)};
  const auto mc = monte_carlo_caseA(p, 20000, Rng(4));
  const Mat gq = grad_q_closed(p) * -2.0;
  for (std::size_t i = 0; i < gq.size(); ++i)
    EXPECT_LE(std::abs(mc.g1.data()[i] - gq.data()[i]), 5 * mc.se1.data()[i] + 1e-12) << i;
}

TEST(CaseA, EnumerationCap) {
  const CaseAParams p{Mat(50, 50), Mat(10, 10)};
  EXPECT_THROW(enumerate_caseA(p), EnumerationCapError);
  EXPECT_THROW(enumerate_caseA(p), ConfigError);
}

TEST(CaseA, CanonicalAndFlatFamiliesAreStationary) {
  for (auto [n, m] : {std::pair<std::size_t, std::size_t>{4, 6}, {10, 12}}) {
    for (const auto& p : {canonical_caseA(n, m), canonical_caseA(n, m, 2.5), flat_caseA(n, m), flat_caseA(n, m, 0.3)}) {
      EXPECT_LT(grad_q_closed(p).max_abs(), 1e-10);
      EXPECT_LT(grad_v_closed(p).max_abs(), 1e-10);
      EXPECT_TRUE(stationary_residuals_caseA(p).all_pass());
    }
  }
  // the flat point really is a different, worse point
  EXPECT_GT(expected_sse_closed(flat_caseA(4, 6)), expected_sse_closed(canonical_caseA(4, 6)) + 0.1);
}

TEST(CaseA, RandomPointIsNotStationary) {
  Rng rng(5);
  const CaseAParams p{rng.normal_matrix(6, 6, 0.5), rng.normal_matrix(4, 4, 0.5)};
  EXPECT_FALSE(stationary_residuals_caseA(p).all_pass());
}

TEST(Simplex, ProjectionProperties) {
  EXPECT_LT(max_abs_diff(project_simplex({0.2, 0.8}), Vec{0.2, 0.8}), 1e-15);
  EXPECT_LT(max_abs_diff(project_simplex({2.0, 0.0}), Vec{1.0, 0.0}), 1e-15);
  EXPECT_LT(max_abs_diff(project_simplex({1.0, 1.0, 1.0}), Vec{1 / 3.0, 1 / 3.0, 1 / 3.0}), 1e-15);
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    Vec y(5);
    for (double& x : y) x = rng.normal();
    const Vec p = project_simplex(y);
    double s = 0.0;
    for (double x : p) {
      EXPECT_GE(x, 0.0);
      s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    // no other simplex point is closer
    auto dist = [&](const Vec& z) {
      double d = 0.0;
      for (std::size_t i = 0; i < 5; ++i) d += (z[i] - y[i]) * (z[i] - y[i]);
      return d;
    };
    for (int k = 0; k < 50; ++k) {
      Vec z(5);
      double zs = 0.0;
      for (double& x : z) zs += (x = -std::log(rng.uniform() + 1e-300));
      for (double& x : z) x /= zs;
      EXPECT_LE(dist(p), dist(z) + 1e-12);
    }
  }
}

TEST(Simplex, DescentReachesCanonicalPoint) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng rng(100 + s);
    const auto start = random_simplex_point(4, 6, rng);
    EXPECT_TRUE(columns_on_simplex(start.q));
    const auto r = projected_descent_caseA(start);
    EXPECT_LT(r.distance, 1e-3) << "seed " << s;
    EXPECT_TRUE(columns_on_simplex(r.p.q));
  }
  EXPECT_TRUE(softmax_constrained_residual(canonical_caseA(4, 6)).all_pass());
}

TEST(CaseB, ClosedVGradientMatchesBruteForce) {
  Rng rng(11);
  const std::size_t n = 3, m = 4;
  const QTrueTable qt{rng.normal_matrix(n, n, 1.0)};
  for (const auto& dist : {CategoryDist::uniform(n), CategoryDist::linear(n)}) {
    const CaseBParams p{rng.normal_matrix(m, m, 0.5), rng.normal_matrix(n, n, 0.5)};
    const Mat fv = central_diff(p.v, [&](const Mat& v) { return caseB_loss(v, p.q, qt.table, dist.p); });
    const Mat closed = grad_v_caseB_closed(p, qt, dist) * -2.0;
    // only the causal lower triangle of rows >= 1 enters the loss
    for (std::size_t i = 1; i < m; ++i)
      for (std::size_t j = 0; j <= i; ++j) EXPECT_NEAR(closed(i, j), fv(i, j), 1e-7) << i << "," << j;
    const auto e = enumerate_caseB(p, qt, dist);
    EXPECT_NEAR(e.loss, caseB_loss(p.v, p.q, qt.table, dist.p), 1e-10);
    const Mat fq = central_diff(p.q, [&](const Mat& q) { return caseB_loss(p.v, q, qt.table, dist.p); });
    EXPECT_LT(max_abs_diff(e.g2, fq), 1e-7);
  }
}

TEST(CaseB, CanonicalAndGaugePointsAreStationary) {
  Rng rng(12);
  const std::size_t n = 4, m = 7;
  const QTrueTable qt{rng.normal_matrix(n, n, 1.0)};
  for (const auto& dist : {CategoryDist::uniform(n), CategoryDist::linear(n)}) {
    EXPECT_TRUE(stationarity_caseB(canonical_caseB(qt, m), qt, dist).all_pass());
    for (double c : {0.5, 2.0, -0.3}) {
      const auto g = gauge_caseB(qt, m, c);
      EXPECT_TRUE(stationarity_caseB(g, qt, dist).all_pass()) << c;
      Rng t(13);
      const auto ctx = sample_context(n, m, dist, t);
      EXPECT_LT(max_abs_diff(predict_caseB(g, ctx), predict_caseB(canonical_caseB(qt, m), ctx)), 1e-12);
    }
  }
  EXPECT_THROW(gauge_caseB(qt, m, -1.0), ConfigError);
}

TEST(CaseB, InvalidBranchWitness) {
  Rng rng(14);
  const std::size_t n = 5;
  for (int t = 0; t < 20; ++t) {
    const QTrueTable qt{rng.normal_matrix(n, n, 1.0)};
    EXPECT_GT(caseB_invalid_branch_witness(qt, CategoryDist::uniform(n)), 1e-6);
  }
  Mat col_const(n, n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) col_const(r, c) = 0.5 * static_cast<double>(c) - 1.0;
  EXPECT_EQ(caseB_invalid_branch_witness({col_const}, CategoryDist::linear(n)), 0.0);
  // Var_r(10 r) for r uniform on 1..4 is 100 * 5/4
  EXPECT_NEAR(caseB_invalid_branch_witness(pair_code_table(4), CategoryDist::uniform(4)), 125.0, 1e-10);
}

TEST(CaseB, InvalidBranchPointMissesTheOffDiagonalEquations) {
  Rng rng(15);
  const std::size_t n = 4, m = 6, row = 4;
  const QTrueTable qt{rng.normal_matrix(n, n, 1.0)};
  const auto dist = CategoryDist::uniform(n);
  const auto p = invalid_branch_caseB(qt, dist, m, row);
  const auto rep = stationarity_caseB_row(p, qt, dist, row);
  EXPECT_LT(rep.value("v_diag"), 1e-10);
  EXPECT_LT(rep.value("q_average"), 1e-10);
  EXPECT_LT(rep.value("qa_spread"), 1e-10);
  EXPECT_LT(rep.value("deltaq"), 1e-10);
  // every off-diagonal v equation is off by kappa (1 - kappa) W
  const double kappa = invalid_branch_kappa(row);
  const double miss = kappa * (1 - kappa) * caseB_invalid_branch_witness(qt, dist);
  EXPECT_GT(miss, 1e-3);
  EXPECT_NEAR(rep.value("v_prev"), miss, 1e-10);
  EXPECT_NEAR(rep.value("v_far"), miss, 1e-10);
}

TEST(InitProbe, MomentsNearPredictions) {
  Rng rng(16);
  const auto stats = init_scaling_probe(1.0, 10, 10000, rng);
  ASSERT_EQ(stats.size(), 4u);
  EXPECT_NEAR(stats[0].mean, 10.0, 1.0);
  EXPECT_NEAR(stats[1].mean, 1.0, 0.1);
  EXPECT_LT(std::abs(stats[2].mean), 3 * stats[2].standard_error);
  EXPECT_LT(std::abs(stats[3].mean), 3 * stats[3].standard_error);
  EXPECT_THROW(init_scaling_probe(1.0, 10, 10, rng), ConfigError);
}
