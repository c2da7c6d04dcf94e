#pragma once

// Expected-loss gradients and stationary points of two reduced attention
// models.
//
// Case A: attention reads positions only. Prediction at position i is
// v * sum_j q(j, i) X_j (non-causal sum over all j), target is the one-hot
// category of position i-1. Categories uniform.
//
// Case B: attention reads categories only. Prediction at position i is
// sum_{j<=i} v(i, j) q(X_j, X_i), target q_true(X_{i-1}, X_i). Categories
// i.i.d. from an arbitrary distribution.
//
// Both losses skip the first position. Closed-form gradients are returned in
// the "half convention": the true derivative of E[SSE] is -2 times the value.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "attnlab/context.hpp"
#include "attnlab/linalg.hpp"
#include "attnlab/report.hpp"

namespace attnlab {

class EnumerationCapError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

inline constexpr double kEnumerationCap = 1e6;

/// Calls f(tokens, probability) for every one of the N^M sequences.
inline void for_each_context(std::size_t n, std::size_t m, const CategoryDist& dist,
                             const std::function<void(const TokenSequence&, double)>& f) {
  if (std::pow(static_cast<double>(n), static_cast<double>(m)) > kEnumerationCap)
    throw EnumerationCapError("enumeration of " + std::to_string(n) + "^" + std::to_string(m) +
                              " contexts exceeds the cap of 1e6; use the monte-carlo oracle instead");
  TokenSequence t;
  t.n = n;
  t.cat.assign(m, 0);
  while (true) {
    double w = 1.0;
    for (int c : t.cat) w *= dist.p[static_cast<std::size_t>(c)];
    if (w > 0.0) f(t, w);
    std::size_t pos = 0;
    while (pos < m && ++t.cat[pos] == static_cast<int>(n)) t.cat[pos++] = 0;
    if (pos == m) break;
  }
}

// ---------------------------------------------------------------- case A --

struct CaseAParams {
  Mat q;  // M x M, column i holds the weights of source positions
  Mat v;  // N x N
};

struct CaseAMoments {
  double tr_v = 0.0;    // Tr(v)/N
  double sum_v = 0.0;   // 1^T v 1 / N^2
  double tr_vv = 0.0;   // Tr(v^T v)/N
  double sum_vv = 0.0;  // 1^T v^T v 1 / N^2
};

inline CaseAMoments caseA_moments(const Mat& v) {
  const double n = static_cast<double>(v.rows());
  CaseAMoments mo;
  Vec rowsum(v.rows(), 0.0);
  for (std::size_t k = 0; k < v.rows(); ++k)
    for (std::size_t l = 0; l < v.cols(); ++l) {
      rowsum[k] += v(k, l);
      mo.tr_vv += v(k, l) * v(k, l);
    }
  for (std::size_t k = 0; k < v.rows(); ++k) {
    mo.tr_v += v(k, k);
    mo.sum_v += rowsum[k];
  }
  for (double r : rowsum) mo.sum_vv += r * r;
  mo.tr_v /= n;
  mo.sum_v /= n * n;
  mo.tr_vv /= n;
  mo.sum_vv /= n * n;
  return mo;
}

namespace detail {
inline void check_caseA(const CaseAParams& p) {
  if (p.q.rows() != p.q.cols() || p.q.rows() < 2) throw ShapeError("case A: q must be M x M, M >= 2");
  if (p.v.rows() != p.v.cols() || p.v.rows() < 2) throw ShapeError("case A: v must be N x N, N >= 2");
}
inline double col_sum(const Mat& q, std::size_t i) {
  double s = 0.0;
  for (std::size_t j = 0; j < q.rows(); ++j) s += q(j, i);
  return s;
}
inline double col_sq(const Mat& q, std::size_t i) {
  double s = 0.0;
  for (std::size_t j = 0; j < q.rows(); ++j) s += q(j, i) * q(j, i);
  return s;
}
inline Vec row_sums(const Mat& v) {
  Vec r(v.rows(), 0.0);
  for (std::size_t k = 0; k < v.rows(); ++k)
    for (std::size_t l = 0; l < v.cols(); ++l) r[k] += v(k, l);
  return r;
}
}  // namespace detail

/// Squared error of one context, summed over positions 2..M.
inline double caseA_context_sse(const CaseAParams& p, const TokenSequence& t) {
  detail::check_caseA(p);
  const std::size_t n = p.v.rows(), m = p.q.rows();
  if (t.size() != m || t.n != n) throw ShapeError("case A: context does not match params");
  double total = 0.0;
  Vec u(n), pred(n);
  for (std::size_t i = 1; i < m; ++i) {
    std::fill(u.begin(), u.end(), 0.0);
    for (std::size_t j = 0; j < m; ++j) u[static_cast<std::size_t>(t.cat[j])] += p.q(j, i);
    for (std::size_t k = 0; k < n; ++k) {
      double s = 0.0;
      for (std::size_t l = 0; l < n; ++l) s += p.v(k, l) * u[l];
      const double target = static_cast<std::size_t>(t.cat[i - 1]) == k ? 1.0 : 0.0;
      total += (target - s) * (target - s);
    }
  }
  return total;
}

inline double essa_empirical(const CaseAParams& p, const std::vector<TokenSequence>& batch) {
  if (batch.empty()) throw ConfigError("essa_empirical: empty batch");
  double s = 0.0;
  for (const auto& t : batch) s += caseA_context_sse(p, t);
  return s / static_cast<double>(batch.size());
}

/// Exact E[SSE] under uniform categories.
inline double expected_sse_closed(const CaseAParams& p) {
  detail::check_caseA(p);
  const auto mo = caseA_moments(p.v);
  const std::size_t m = p.q.rows();
  double total = 0.0;
  for (std::size_t i = 1; i < m; ++i) {
    const double s = detail::col_sum(p.q, i), qq = detail::col_sq(p.q, i), sh = p.q(i - 1, i);
    total += 1.0 - 2.0 * (sh * mo.tr_v + (s - sh) * mo.sum_v) + (s * s - qq) * mo.sum_vv + qq * mo.tr_vv;
  }
  return total;
}

inline Mat grad_q_closed(const CaseAParams& p) {
  detail::check_caseA(p);
  const auto mo = caseA_moments(p.v);
  const std::size_t m = p.q.rows();
  Mat g(m, m);
  for (std::size_t i = 1; i < m; ++i) {
    const double s = detail::col_sum(p.q, i);
    for (std::size_t j = 0; j < m; ++j) {
      const double e = j + 1 == i ? mo.tr_v : mo.sum_v;
      g(j, i) = e - mo.sum_vv * s - p.q(j, i) * (mo.tr_vv - mo.sum_vv);
    }
  }
  return g;
}

inline Mat grad_v_closed(const CaseAParams& p) {
  detail::check_caseA(p);
  const std::size_t n = p.v.rows(), m = p.q.rows();
  const double nn = static_cast<double>(n), n2 = nn * nn;
  const Vec r = detail::row_sums(p.v);
  Mat g(n, n);
  for (std::size_t i = 1; i < m; ++i) {
    const double s = detail::col_sum(p.q, i), qq = detail::col_sq(p.q, i), sh = p.q(i - 1, i);
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t l = 0; l < n; ++l) {
        const double delta = k == l ? 1.0 : 0.0;
        g(k, l) += s / n2 + sh * (delta / nn - 1.0 / n2) - s * s * r[k] / n2 - qq * (p.v(k, l) / nn - r[k] / n2);
      }
  }
  return g;
}

/// Exact gradients (true derivatives, not the half convention) plus the loss.
/// se_* hold Monte-Carlo standard errors and are empty otherwise.
struct GradPair {
  double loss = 0.0;
  Mat g1;  // case A: d/dq (M x M); case B: d/dv (M x M)
  Mat g2;  // case A: d/dv (N x N); case B: d/dq (N x N)
  Mat se1, se2;
};

/// SSE of one context and its gradient, accumulated with weight w.
inline double caseA_sample_grad(const CaseAParams& p, const TokenSequence& t, double w, Mat& gq, Mat& gv) {
  const std::size_t n = p.v.rows(), m = p.q.rows();
  double loss = 0.0;
  Vec u(n), r(n), vr(n);
  for (std::size_t i = 1; i < m; ++i) {
    std::fill(u.begin(), u.end(), 0.0);
    for (std::size_t j = 0; j < m; ++j) u[static_cast<std::size_t>(t.cat[j])] += p.q(j, i);
    for (std::size_t k = 0; k < n; ++k) {
      double s = 0.0;
      for (std::size_t l = 0; l < n; ++l) s += p.v(k, l) * u[l];
      r[k] = (static_cast<std::size_t>(t.cat[i - 1]) == k ? 1.0 : 0.0) - s;
      loss += r[k] * r[k];
    }
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t l = 0; l < n; ++l) gv(k, l) -= 2.0 * w * r[k] * u[l];
    for (std::size_t l = 0; l < n; ++l) {
      vr[l] = 0.0;
      for (std::size_t k = 0; k < n; ++k) vr[l] += p.v(k, l) * r[k];
    }
    for (std::size_t j = 0; j < m; ++j) gq(j, i) -= 2.0 * w * vr[static_cast<std::size_t>(t.cat[j])];
  }
  return loss;
}

inline GradPair enumerate_caseA(const CaseAParams& p) {
  detail::check_caseA(p);
  const std::size_t n = p.v.rows(), m = p.q.rows();
  GradPair g{0.0, Mat(m, m), Mat(n, n), {}, {}};
  for_each_context(n, m, CategoryDist::uniform(n), [&](const TokenSequence& t, double w) {
    g.loss += w * caseA_sample_grad(p, t, w, g.g1, g.g2);
  });
  return g;
}

namespace detail {
// Mean and standard error over samples of a per-sample gradient.
template <class Sample>
GradPair monte_carlo(std::size_t rows1, std::size_t cols1, std::size_t rows2, std::size_t cols2,
                     std::size_t samples, Sample&& sample) {
  if (samples < 2) throw ConfigError("monte-carlo oracle needs at least 2 samples");
  Mat s1(rows1, cols1), ss1(rows1, cols1), s2(rows2, cols2), ss2(rows2, cols2);
  Mat g1(rows1, cols1), g2(rows2, cols2);
  double loss = 0.0;
  for (std::size_t k = 0; k < samples; ++k) {
    std::fill(g1.data().begin(), g1.data().end(), 0.0);
    std::fill(g2.data().begin(), g2.data().end(), 0.0);
    loss += sample(k, g1, g2);
    for (std::size_t x = 0; x < g1.size(); ++x) {
      s1.data()[x] += g1.data()[x];
      ss1.data()[x] += g1.data()[x] * g1.data()[x];
    }
    for (std::size_t x = 0; x < g2.size(); ++x) {
      s2.data()[x] += g2.data()[x];
      ss2.data()[x] += g2.data()[x] * g2.data()[x];
    }
  }
  const double s = static_cast<double>(samples);
  auto finish = [s](Mat& sum, Mat& sq) {
    for (std::size_t x = 0; x < sum.size(); ++x) {
      const double mean = sum.data()[x] / s;
      const double var = std::max(0.0, (sq.data()[x] / s - mean * mean) * s / (s - 1.0));
      sum.data()[x] = mean;
      sq.data()[x] = std::sqrt(var / s);
    }
  };
  finish(s1, ss1);
  finish(s2, ss2);
  return {loss / s, s1, s2, ss1, ss2};
}

// Central differences of a loss over every coordinate of two matrices.
template <class Params, class Loss>
GradPair finite_diff(Params p, Mat Params::*a, Mat Params::*b, double h, Loss&& loss) {
  GradPair g{loss(p), Mat((p.*a).rows(), (p.*a).cols()), Mat((p.*b).rows(), (p.*b).cols()), {}, {}};
  for (auto [member, out] : {std::pair{a, &g.g1}, std::pair{b, &g.g2}}) {
    for (std::size_t x = 0; x < (p.*member).size(); ++x) {
      double& c = (p.*member).data()[x];
      const double keep = c;
      c = keep + h;
      const double up = loss(p);
      c = keep - h;
      const double down = loss(p);
      c = keep;
      out->data()[x] = (up - down) / (2.0 * h);
    }
  }
  return g;
}
}  // namespace detail

inline GradPair monte_carlo_caseA(const CaseAParams& p, std::size_t samples, const Rng& rng) {
  detail::check_caseA(p);
  const std::size_t n = p.v.rows(), m = p.q.rows();
  const auto dist = CategoryDist::uniform(n);
  return detail::monte_carlo(m, m, n, n, samples, [&](std::size_t k, Mat& gq, Mat& gv) {
    Rng sub = rng.split(k);
    return caseA_sample_grad(p, sample_context(n, m, dist, sub), 1.0, gq, gv);
  });
}

inline double enumerate_caseA_loss(const CaseAParams& p) {
  double loss = 0.0;
  for_each_context(p.v.rows(), p.q.rows(), CategoryDist::uniform(p.v.rows()),
                   [&](const TokenSequence& t, double w) { loss += w * caseA_context_sse(p, t); });
  return loss;
}

inline GradPair finite_diff_caseA(const CaseAParams& p, double h) {
  detail::check_caseA(p);
  return detail::finite_diff(p, &CaseAParams::q, &CaseAParams::v, h,
                             [](const CaseAParams& x) { return enumerate_caseA_loss(x); });
}

/// v = c I, q = shift / c.
inline CaseAParams canonical_caseA(std::size_t n, std::size_t m, double c = 1.0) {
  return {shift_right(m) * (1.0 / c), Mat::identity(n) * c};
}

namespace detail {
inline CaseAParams flat_point(std::size_t n, std::size_t m, double v0, double beta) {
  CaseAParams p{Mat(m, m, beta), Mat(n, n, v0)};
  for (std::size_t i = 1; i < m; ++i) p.q(i - 1, i) = 0.0;
  return p;
}
}  // namespace detail

/// Flat stationary family: v = v0 everywhere, every q entry equal to beta
/// except the shift entries, which are 0. beta is the root of the (common)
/// v-gradient entry, found by bisection.
inline CaseAParams flat_caseA(std::size_t n, std::size_t m, double v0 = 1.0) {
  if (!(v0 > 0.0)) throw ConfigError("flat_caseA: v0 must be positive");
  auto g = [&](double beta) { return grad_v_closed(detail::flat_point(n, m, v0, beta))(0, 0); };
  double lo = 1e-300, hi = 1.0;
  while (g(hi) > 0.0) hi *= 2.0;
  for (int it = 0; it < 400 && (hi - lo) > 1e-14 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    (g(mid) > 0.0 ? lo : hi) = mid;
  }
  return detail::flat_point(n, m, v0, 0.5 * (lo + hi));
}

struct CaseASummary {
  double v_bar = 0.0;    // mean entry of v
  double delta_v = 0.0;  // mean diagonal minus mean off-diagonal
  double q_bar = 0.0;    // mean entry of q over columns 2..M
  double delta_q = 0.0;  // mean over columns of shift entry minus the other entries' mean
};

inline CaseASummary summarize_caseA(const CaseAParams& p) {
  const std::size_t n = p.v.rows(), m = p.q.rows();
  CaseASummary s;
  double diag = 0.0, off = 0.0;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t l = 0; l < n; ++l) (k == l ? diag : off) += p.v(k, l);
  s.v_bar = (diag + off) / static_cast<double>(n * n);
  s.delta_v = diag / static_cast<double>(n) - off / static_cast<double>(n * n - n);
  for (std::size_t i = 1; i < m; ++i) {
    const double sum = detail::col_sum(p.q, i);
    s.q_bar += sum / static_cast<double>(m);
    s.delta_q += p.q(i - 1, i) - (sum - p.q(i - 1, i)) / static_cast<double>(m - 1);
  }
  s.q_bar /= static_cast<double>(m - 1);
  s.delta_q /= static_cast<double>(m - 1);
  return s;
}

/// Residuals of the stationarity relations at p. Relations derived by
/// dividing through by delta_v are informational when delta_v vanishes.
inline ResidualReport stationary_residuals_caseA(const CaseAParams& p, double tol = 1e-10) {
  detail::check_caseA(p);
  const std::size_t n = p.v.rows(), m = p.q.rows();
  const double nn = static_cast<double>(n), mm = static_cast<double>(m);
  ResidualReport rep{"case A stationarity", {}};
  rep.add("grad_q_max", grad_q_closed(p).max_abs(), tol);
  rep.add("grad_v_max", grad_v_closed(p).max_abs(), tol);

  double sum_s = 0.0, sum_s2 = 0.0, sum_shift = 0.0, sum_qq = 0.0;
  for (std::size_t i = 1; i < m; ++i) {
    const double s = detail::col_sum(p.q, i);
    sum_s += s;
    sum_s2 += s * s;
    sum_shift += p.q(i - 1, i);
    sum_qq += detail::col_sq(p.q, i);
  }
  const Vec rows = detail::row_sums(p.v);
  const auto s = summarize_caseA(p);
  const double eps = 1e-9;

  double row_gap = 0.0;
  if (sum_s2 > 0.0)
    for (double r : rows) row_gap = std::max(row_gap, std::abs(r - sum_s / sum_s2));
  rep.add("v_row_sum", row_gap, tol, sum_s2 == 0.0, "row sum of v against sum S_i / sum S_i^2");
  rep.add("delta_v", sum_qq > 0.0 ? s.delta_v - sum_shift / sum_qq : 0.0, tol, sum_qq == 0.0);
  const bool dv_zero = std::abs(s.delta_v) < eps;
  rep.add("delta_product", s.delta_q * s.delta_v - 1.0, tol, dv_zero,
          dv_zero ? "delta_v = 0: relation does not apply" : "");
  const double den = s.v_bar * s.v_bar * nn * mm + s.delta_v * s.delta_v * (1.0 - 1.0 / nn);
  rep.add("q_mean", den != 0.0 ? s.q_bar - (s.v_bar + s.delta_v * (1.0 - 1.0 / nn) / mm) / den : 0.0, tol, den == 0.0);
  rep.add("v_mean", s.q_bar != 0.0 ? s.v_bar * nn - 1.0 / (mm * s.q_bar) : 0.0, tol, s.q_bar == 0.0);
  const bool dq_zero = std::abs(s.delta_q) < eps;
  const double ratio = dq_zero ? 0.0 : s.q_bar / s.delta_q;
  rep.add("final_barq", mm * ratio * ratio - ratio, tol, dv_zero || dq_zero,
          dv_zero ? "delta_v = 0: relation does not apply" : "");

  double off_lo = std::numeric_limits<double>::infinity(), off_hi = -off_lo;
  double dg_lo = off_lo, dg_hi = -off_lo;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t l = 0; l < n; ++l) {
      double& lo = k == l ? dg_lo : off_lo;
      double& hi = k == l ? dg_hi : off_hi;
      lo = std::min(lo, p.v(k, l));
      hi = std::max(hi, p.v(k, l));
    }
  rep.add("v_offdiag_spread", off_hi - off_lo, tol);
  rep.add("v_diag_spread", dg_hi - dg_lo, tol);

  double q_spread = 0.0, dq_lo = std::numeric_limits<double>::infinity(), dq_hi = -dq_lo;
  for (std::size_t i = 1; i < m; ++i) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j + 1 == i) continue;
      lo = std::min(lo, p.q(j, i));
      hi = std::max(hi, p.q(j, i));
      sum += p.q(j, i);
    }
    q_spread = std::max(q_spread, hi - lo);
    const double dq = p.q(i - 1, i) - sum / (mm - 1.0);
    dq_lo = std::min(dq_lo, dq);
    dq_hi = std::max(dq_hi, dq);
  }
  rep.add("q_offshift_spread", q_spread, tol);
  rep.add("deltaq_spread", dq_hi - dq_lo, tol);
  return rep;
}

// ------------------------------------------------- softmax-constrained A --

/// Euclidean projection onto the probability simplex.
inline Vec project_simplex(Vec y) {
  Vec u = y;
  std::sort(u.begin(), u.end(), std::greater<>());
  double css = 0.0, theta = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    css += u[k];
    const double t = (css - 1.0) / static_cast<double>(k + 1);
    if (u[k] - t > 0.0) theta = t;
  }
  for (double& x : y) x = std::max(0.0, x - theta);
  return y;
}

inline bool columns_on_simplex(const Mat& q, double tol = 1e-9) {
  for (std::size_t i = 1; i < q.cols(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < q.rows(); ++j) {
      if (q(j, i) < -tol) return false;
      s += q(j, i);
    }
    if (std::abs(s - 1.0) > tol) return false;
  }
  return true;
}

/// Stationarity under the column-simplex constraint on q (columns 2..M): the
/// q-gradient must be constant within each column, the v-gradient zero.
inline ResidualReport softmax_constrained_residual(const CaseAParams& p, double tol = 1e-10) {
  detail::check_caseA(p);
  if (!columns_on_simplex(p.q)) throw ConfigError("softmax_constrained_residual: q columns 2..M are not on the simplex");
  const Mat gq = grad_q_closed(p);
  double spread = 0.0;
  for (std::size_t i = 1; i < gq.cols(); ++i) {
    const Vec c = gq.col(i);
    const auto [lo, hi] = std::minmax_element(c.begin(), c.end());
    spread = std::max(spread, *hi - *lo);
  }
  const double gv = grad_v_closed(p).max_abs();
  ResidualReport rep{"case A, simplex-constrained q", {}};
  rep.add("q_column_spread", spread, tol);
  rep.add("grad_v_max", gv, tol);
  rep.add("total", spread + gv, tol);
  return rep;
}

/// Max-norm distance to (v = I, q = shift), ignoring q's first column (no
/// target reads it).
inline double distance_to_canonical(const CaseAParams& p) {
  const auto c = canonical_caseA(p.v.rows(), p.q.rows());
  double d = max_abs_diff(p.v, c.v);
  for (std::size_t j = 0; j < p.q.rows(); ++j)
    for (std::size_t i = 1; i < p.q.cols(); ++i) d = std::max(d, std::abs(p.q(j, i) - c.q(j, i)));
  return d;
}

/// q columns from a flat Dirichlet, v entries normal(0, v_sigma).
/// With v_sigma near 1 a fraction of descent runs (about 1 in 8 at N=4, M=6)
/// ends on the boundary point v = J/N, q(i-1, i) = 0, where every gradient
/// vanishes; small v_sigma avoids that basin.
inline CaseAParams random_simplex_point(std::size_t n, std::size_t m, Rng& rng, double v_sigma = 0.1) {
  CaseAParams p{Mat(m, m), rng.normal_matrix(n, n, v_sigma)};
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += (p.q(j, i) = -std::log(1.0 - rng.uniform()));
    for (std::size_t j = 0; j < m; ++j) p.q(j, i) /= s;
  }
  return p;
}

struct DescentResult {
  CaseAParams p;
  std::size_t iterations = 0;
  double loss = 0.0;
  double distance = 0.0;  // to the canonical point
  bool converged = false;
};

/// Projected gradient descent on E[SSE] with q columns 2..M kept on the
/// simplex and v free. Barzilai-Borwein trial steps, Armijo backtracking.
inline DescentResult projected_descent_caseA(CaseAParams p, std::size_t max_iter = 200000, double step_tol = 1e-14) {
  detail::check_caseA(p);
  const std::size_t m = p.q.rows();
  auto project = [m](CaseAParams& x) {
    for (std::size_t i = 1; i < m; ++i) {
      Vec c = project_simplex(x.q.col(i));
      for (std::size_t j = 0; j < m; ++j) x.q(j, i) = c[j];
    }
  };
  auto grads = [](const CaseAParams& x) {
    return std::pair{grad_q_closed(x) * -2.0, grad_v_closed(x) * -2.0};
  };
  project(p);
  double f = expected_sse_closed(p);
  auto [gq, gv] = grads(p);
  double alpha = 1e-2;
  DescentResult res;
  for (res.iterations = 0; res.iterations < max_iter; ++res.iterations) {
    CaseAParams trial;
    double ft = 0.0, decrease = 0.0;
    for (int bt = 0; bt < 60; ++bt) {
      trial = {p.q - gq * alpha, p.v - gv * alpha};
      project(trial);
      decrease = 0.0;
      for (std::size_t x = 0; x < gq.size(); ++x) decrease += gq.data()[x] * (trial.q.data()[x] - p.q.data()[x]);
      for (std::size_t x = 0; x < gv.size(); ++x) decrease += gv.data()[x] * (trial.v.data()[x] - p.v.data()[x]);
      ft = expected_sse_closed(trial);
      if (ft <= f + 1e-4 * decrease) break;
      alpha *= 0.5;
    }
    const double step = std::max(max_abs_diff(trial.q, p.q), max_abs_diff(trial.v, p.v));
    auto [gq2, gv2] = grads(trial);
    double ss = 0.0, sy = 0.0;
    for (std::size_t x = 0; x < gq.size(); ++x) {
      const double s = trial.q.data()[x] - p.q.data()[x], y = gq2.data()[x] - gq.data()[x];
      ss += s * s;
      sy += s * y;
    }
    for (std::size_t x = 0; x < gv.size(); ++x) {
      const double s = trial.v.data()[x] - p.v.data()[x], y = gv2.data()[x] - gv.data()[x];
      ss += s * s;
      sy += s * y;
    }
    p = std::move(trial);
    f = ft;
    gq = std::move(gq2);
    gv = std::move(gv2);
    if (step < step_tol) {
      res.converged = true;
      break;
    }
    alpha = sy > 0.0 ? std::clamp(ss / sy, 1e-10, 1e10) : 1e-2;
  }
  res.loss = f;
  res.distance = distance_to_canonical(p);
  res.p = std::move(p);
  return res;
}

// ---------------------------------------------------------------- case B --

struct CaseBParams {
  Mat v;  // M x M, row i mixes sources j <= i
  Mat q;  // N x N, q(r, t) scores source category r for current category t
};

namespace detail {
inline void check_caseB(const CaseBParams& p) {
  if (p.v.rows() != p.v.cols() || p.v.rows() < 2) throw ShapeError("case B: v must be M x M, M >= 2");
  if (p.q.rows() != p.q.cols() || p.q.rows() < 2) throw ShapeError("case B: q must be N x N, N >= 2");
}
}  // namespace detail

inline Vec predict_caseB(const CaseBParams& p, const TokenSequence& t) {
  detail::check_caseB(p);
  const std::size_t m = p.v.rows();
  if (t.size() != m || t.n != p.q.rows()) throw ShapeError("predict_caseB: context does not match params");
  Vec y(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const auto ti = static_cast<std::size_t>(t.cat[i]);
    for (std::size_t j = 0; j <= i; ++j) y[i] += p.v(i, j) * p.q(static_cast<std::size_t>(t.cat[j]), ti);
  }
  return y;
}

inline double caseB_context_sse(const CaseBParams& p, const QTrueTable& qt, const TokenSequence& t) {
  const Vec y = targets(t, qt), yhat = predict_caseB(p, t);
  double s = 0.0;
  for (std::size_t i = 1; i < y.size(); ++i) s += (y[i] - yhat[i]) * (y[i] - yhat[i]);
  return s;
}

inline double caseB_sample_grad(const CaseBParams& p, const QTrueTable& qt, const TokenSequence& t, double w,
                                Mat& gv, Mat& gq) {
  const Vec y = targets(t, qt), yhat = predict_caseB(p, t);
  double loss = 0.0;
  for (std::size_t i = 1; i < y.size(); ++i) {
    const double r = y[i] - yhat[i];
    loss += r * r;
    const auto ti = static_cast<std::size_t>(t.cat[i]);
    for (std::size_t j = 0; j <= i; ++j) {
      const auto tj = static_cast<std::size_t>(t.cat[j]);
      gv(i, j) -= 2.0 * w * r * p.q(tj, ti);
      gq(tj, ti) -= 2.0 * w * r * p.v(i, j);
    }
  }
  return loss;
}

inline GradPair enumerate_caseB(const CaseBParams& p, const QTrueTable& qt, const CategoryDist& dist) {
  detail::check_caseB(p);
  const std::size_t n = p.q.rows(), m = p.v.rows();
  dist.validate();
  GradPair g{0.0, Mat(m, m), Mat(n, n), {}, {}};
  for_each_context(n, m, dist, [&](const TokenSequence& t, double w) {
    g.loss += w * caseB_sample_grad(p, qt, t, w, g.g1, g.g2);
  });
  return g;
}

inline GradPair monte_carlo_caseB(const CaseBParams& p, const QTrueTable& qt, const CategoryDist& dist,
                                  std::size_t samples, const Rng& rng) {
  detail::check_caseB(p);
  const std::size_t n = p.q.rows(), m = p.v.rows();
  return detail::monte_carlo(m, m, n, n, samples, [&](std::size_t k, Mat& gv, Mat& gq) {
    Rng sub = rng.split(k);
    return caseB_sample_grad(p, qt, sample_context(n, m, dist, sub), 1.0, gv, gq);
  });
}

inline double enumerate_caseB_loss(const CaseBParams& p, const QTrueTable& qt, const CategoryDist& dist) {
  double loss = 0.0;
  for_each_context(p.q.rows(), p.v.rows(), dist,
                   [&](const TokenSequence& t, double w) { loss += w * caseB_context_sse(p, qt, t); });
  return loss;
}

inline GradPair finite_diff_caseB(const CaseBParams& p, const QTrueTable& qt, const CategoryDist& dist, double h) {
  detail::check_caseB(p);
  return detail::finite_diff(p, &CaseBParams::v, &CaseBParams::q, h,
                             [&](const CaseBParams& x) { return enumerate_caseB_loss(x, qt, dist); });
}

/// Exact moments of the learned table q and the target table under dist.
struct CaseBMoments {
  Vec mu_q, mu_t;          // per current category t: E_r q(r,t), E_r q_true(r,t)
  double qq = 0.0;         // E[q(X1,X2)^2]
  double cross = 0.0;      // E[q(X1,X3) q(X2,X3)]
  double tq = 0.0;         // E[q_true(X1,X2) q(X1,X2)]
  double diag = 0.0;       // E[q(X2,X2) q(X1,X2)]
  double dd = 0.0;         // E[q(X1,X1)^2]
  double tq_cross = 0.0;   // E[q_true(X1,X3) q(X2,X3)]
  double tq_diag = 0.0;    // E[q_true(X1,X2) q(X2,X2)]
};

inline CaseBMoments caseB_moments(const Mat& q, const Mat& qt, const CategoryDist& dist) {
  const std::size_t n = q.rows();
  const Vec& p = dist.p;
  CaseBMoments mo{Vec(n, 0.0), Vec(n, 0.0)};
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t r = 0; r < n; ++r) {
      mo.mu_q[t] += p[r] * q(r, t);
      mo.mu_t[t] += p[r] * qt(r, t);
      mo.qq += p[t] * p[r] * q(r, t) * q(r, t);
      mo.tq += p[t] * p[r] * qt(r, t) * q(r, t);
    }
    mo.cross += p[t] * mo.mu_q[t] * mo.mu_q[t];
    mo.diag += p[t] * q(t, t) * mo.mu_q[t];
    mo.dd += p[t] * q(t, t) * q(t, t);
    mo.tq_cross += p[t] * mo.mu_t[t] * mo.mu_q[t];
    mo.tq_diag += p[t] * mo.mu_t[t] * q(t, t);
  }
  return mo;
}

/// Closed-form v-gradient of E[SSE] in the half convention (the true
/// derivative is -2 times the value). Row 0 and the entries above the
/// diagonal are zero.
inline Mat grad_v_caseB_closed(const CaseBParams& p, const QTrueTable& qt, const CategoryDist& dist) {
  detail::check_caseB(p);
  dist.validate();
  const std::size_t m = p.v.rows();
  const auto mo = caseB_moments(p.q, qt.table, dist);
  Mat g(m, m);
  for (std::size_t i = 1; i < m; ++i) {
    double a_sum = 0.0;
    for (std::size_t j = 0; j < i; ++j) a_sum += p.v(i, j);
    const double b = p.v(i, i);
    for (std::size_t s = 0; s < i; ++s) {
      const double target = s + 1 == i ? mo.tq : mo.tq_cross;
      g(i, s) = target - (mo.cross * a_sum + p.v(i, s) * (mo.qq - mo.cross) + b * mo.diag);
    }
    g(i, i) = mo.tq_diag - (mo.diag * a_sum + b * mo.dd);
  }
  return g;
}

/// Sum_t P(t) Var_r q_true(r, t): zero exactly when q_true depends on t only.
inline double caseB_invalid_branch_witness(const QTrueTable& qt, const CategoryDist& dist) {
  dist.validate();
  const std::size_t n = qt.n();
  if (dist.size() != n) throw ConfigError("witness: distribution length does not match table");
  double w = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    double mean = 0.0;
    for (std::size_t r = 0; r < n; ++r) mean += dist.p[r] * qt(r, t);
    double var = 0.0;
    for (std::size_t r = 0; r < n; ++r) var += dist.p[r] * (qt(r, t) - mean) * (qt(r, t) - mean);
    w += dist.p[t] * var;
  }
  return w;
}

/// Residual per equation is LHS - RHS; for the v-equations this equals
/// -1/2 of the derivative of E[SSE] with respect to the matching v entry.
/// `rows` selects which (0-based) rows are checked; empty means all rows >= 1.
inline ResidualReport stationarity_caseB(const CaseBParams& p, const QTrueTable& qt, const CategoryDist& dist,
                                         std::vector<std::size_t> rows = {}, double tol = 1e-10) {
  detail::check_caseB(p);
  dist.validate();
  const std::size_t n = p.q.rows(), m = p.v.rows();
  if (qt.n() != n || dist.size() != n) throw ConfigError("stationarity_caseB: table or distribution size mismatch");
  if (rows.empty())
    for (std::size_t i = 1; i < m; ++i) rows.push_back(i);
  const auto mo = caseB_moments(p.q, qt.table, dist);

  double v_far = 0.0, v_prev = 0.0, v_diag = 0.0, q_average = 0.0, qa = 0.0, dq = 0.0, offshift = 0.0;
  const double inf = std::numeric_limits<double>::infinity();
  double vii_lo = inf, vii_hi = -inf, vsh_lo = inf, vsh_hi = -inf, rest_lo = inf, rest_hi = -inf;
  for (std::size_t i : rows) {
    if (i == 0 || i >= m) throw ConfigError("stationarity_caseB: row index out of range");
    double a_sum = 0.0, sq = 0.0;
    for (std::size_t j = 0; j < i; ++j) {
      a_sum += p.v(i, j);
      sq += p.v(i, j) * p.v(i, j);
    }
    const double b = p.v(i, i);
    for (std::size_t s = 0; s + 1 < i; ++s)
      v_far = std::max(v_far, std::abs(mo.tq_cross - (mo.cross * a_sum + p.v(i, s) * (mo.qq - mo.cross) + b * mo.diag)));
    v_prev = std::max(v_prev, std::abs(mo.tq - (mo.cross * a_sum + p.v(i, i - 1) * (mo.qq - mo.cross) + b * mo.diag)));
    v_diag = std::max(v_diag, std::abs(mo.tq_diag - (mo.diag * a_sum + b * mo.dd)));
    for (std::size_t t = 0; t < n; ++t)
      q_average = std::max(q_average, std::abs(mo.mu_t[t] - (mo.mu_q[t] * a_sum + b * p.q(t, t))));

    // q(r, t) = a(t) + kappa q_true(r, t) off the diagonal, diagonal offset zero
    if (sq > 0.0) {
      const double kappa = p.v(i, i - 1) / sq;
      for (std::size_t t = 0; t < n; ++t) {
        double lo = inf, hi = -inf, mean = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          if (r == t) continue;
          const double a = p.q(r, t) - kappa * qt(r, t);
          lo = std::min(lo, a);
          hi = std::max(hi, a);
          mean += a;
        }
        mean /= static_cast<double>(n - 1);
        qa = std::max(qa, hi - lo);
        dq = std::max(dq, std::abs((p.q(t, t) - mean - kappa * qt(t, t)) * sq));
      }
    }
    double lo = inf, hi = -inf, rest = 0.0;
    for (std::size_t j = 0; j + 1 < i; ++j) {
      lo = std::min(lo, p.v(i, j));
      hi = std::max(hi, p.v(i, j));
      rest += p.v(i, j);
    }
    if (i >= 2) offshift = std::max(offshift, hi - lo);
    vii_lo = std::min(vii_lo, b);
    vii_hi = std::max(vii_hi, b);
    vsh_lo = std::min(vsh_lo, p.v(i, i - 1));
    vsh_hi = std::max(vsh_hi, p.v(i, i - 1));
    rest_lo = std::min(rest_lo, rest);
    rest_hi = std::max(rest_hi, rest);
  }
  ResidualReport rep{"case B stationarity", {}};
  rep.add("v_far", v_far, tol, false, "v(i,s), s <= i-2");
  rep.add("v_prev", v_prev, tol, false, "v(i,i-1)");
  rep.add("v_diag", v_diag, tol, false, "v(i,i)");
  rep.add("q_average", q_average, tol, false, "weighted average of the q-equations, per t");
  rep.add("qa_spread", qa, tol);
  rep.add("deltaq", dq, tol);
  rep.add("v_offshift_spread", offshift, tol);
  rep.add("vii_row_spread", vii_hi - vii_lo, tol);
  rep.add("vshift_row_spread", vsh_hi - vsh_lo, tol);
  rep.add("vrest_row_spread", rest_hi - rest_lo, tol);
  return rep;
}

inline ResidualReport stationarity_caseB_row(const CaseBParams& p, const QTrueTable& qt, const CategoryDist& dist,
                                             std::size_t row, double tol = 1e-10) {
  return stationarity_caseB(p, qt, dist, {row}, tol);
}

/// v has ones on the subdiagonal, q = q_true.
inline CaseBParams canonical_caseB(const QTrueTable& qt, std::size_t m) {
  return {shift_down(m), qt.table};
}

/// v(i,i-1) = 1, v(i,i) = c, q(r,t) = q_true(r,t) + a(t) with a(t) = -c/(1+c) q_true(t,t).
/// Predictions equal the canonical ones on every context.
inline CaseBParams gauge_caseB(const QTrueTable& qt, std::size_t m, double c) {
  if (c == -1.0) throw ConfigError("gauge_caseB: c = -1 has no gauge partner");
  CaseBParams p{shift_down(m), qt.table};
  for (std::size_t i = 1; i < m; ++i) p.v(i, i) = c;
  const std::size_t n = qt.n();
  for (std::size_t t = 0; t < n; ++t) {
    const double a = -c / (1.0 + c) * qt(t, t);
    for (std::size_t r = 0; r < n; ++r) p.q(r, t) += a;
  }
  return p;
}

/// A point on the zero-row-sum branch at (0-based) row i >= 2: v(i,i-1) = 1,
/// v(i,j) = -1/(i-1) for j < i-1, v(i,i) = 1, and
/// q = kappa q_true + a(t) with kappa = (i-1)/i, a(t) = E_r q_true(r,t) - kappa q_true(t,t).
/// Other rows of v are zero; check it with stationarity_caseB_row.
inline CaseBParams invalid_branch_caseB(const QTrueTable& qt, const CategoryDist& dist, std::size_t m, std::size_t row) {
  if (row < 2 || row >= m) throw ConfigError("invalid_branch_caseB: row must be in [2, M)");
  dist.validate();
  const std::size_t n = qt.n();
  CaseBParams p{Mat(m, m), Mat(n, n)};
  const double others = static_cast<double>(row - 1);
  p.v(row, row - 1) = 1.0;
  p.v(row, row) = 1.0;
  for (std::size_t j = 0; j + 1 < row; ++j) p.v(row, j) = -1.0 / others;
  const double kappa = others / static_cast<double>(row);
  for (std::size_t t = 0; t < n; ++t) {
    double mu = 0.0;
    for (std::size_t r = 0; r < n; ++r) mu += dist.p[r] * qt(r, t);
    const double a = mu - kappa * qt(t, t);
    for (std::size_t r = 0; r < n; ++r) p.q(r, t) = kappa * qt(r, t) + a;
  }
  return p;
}

inline double invalid_branch_kappa(std::size_t row) {
  return static_cast<double>(row - 1) / static_cast<double>(row);
}

// ------------------------------------------------------ init magnitudes --

struct ProbeStat {
  std::string name;
  double mean = 0.0;
  double stddev = 0.0;
  double predicted_mean = 0.0;
  double predicted_scale = 0.0;  // predicted order of magnitude (sd for signed terms)
  double standard_error = 0.0;   // stddev / sqrt(trials)
};

inline std::vector<ProbeStat> init_scaling_probe(double sigma, std::size_t n, std::size_t trials, Rng& rng) {
  if (trials < 1000) throw ConfigError("init_scaling_probe: need at least 1000 trials");
  const double nn = static_cast<double>(n);
  std::vector<ProbeStat> stats{
      {"tr_vtv_over_n", 0, 0, sigma * sigma * nn, sigma * sigma * nn, 0},
      {"sum_vtv_over_n2", 0, 0, sigma * sigma, sigma * sigma, 0},
      {"tr_v_over_n", 0, 0, 0.0, sigma / std::sqrt(nn), 0},
      {"sum_v_over_n2", 0, 0, 0.0, sigma / nn, 0},
  };
  std::vector<Vec> samples(4, Vec(trials));
  for (std::size_t k = 0; k < trials; ++k) {
    Mat v = rng.normal_matrix(n, n, 1.0) * sigma;
    const auto mo = caseA_moments(v);
    samples[0][k] = mo.tr_vv;
    samples[1][k] = mo.sum_vv;
    samples[2][k] = mo.tr_v;
    samples[3][k] = mo.sum_v;
  }
  for (std::size_t s = 0; s < 4; ++s) {
    const double mean = std::accumulate(samples[s].begin(), samples[s].end(), 0.0) / static_cast<double>(trials);
    double var = 0.0;
    for (double x : samples[s]) var += (x - mean) * (x - mean);
    var /= static_cast<double>(trials - 1);
    stats[s].mean = mean;
    stats[s].stddev = std::sqrt(var);
    stats[s].standard_error = std::sqrt(var / static_cast<double>(trials));
  }
  return stats;
}

}  // namespace attnlab
