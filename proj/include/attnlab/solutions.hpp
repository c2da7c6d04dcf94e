#pragma once

// The three hand-programmed parameterizations of the one-level pipeline
//   y = C * ReLU(B * (attn + skip_gain * X) + bias)
// and the executable form of the solution-2 / solution-3 equivalence.

#include <optional>
#include <string>

#include "attnlab/attention.hpp"
#include "attnlab/context.hpp"
#include "attnlab/linalg.hpp"

namespace attnlab {

class ScaleBoundError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Label { sol1_original, sol1_corrected, sol1_linear, sol2, sol3 };

inline std::string to_string(Label l) {
  switch (l) {
    case Label::sol1_original: return "sol1-original";
    case Label::sol1_corrected: return "sol1-corrected";
    case Label::sol1_linear: return "sol1-linear";
    case Label::sol2: return "sol2";
    case Label::sol3: return "sol3";
  }
  return "?";
}

enum class BVariant { original, corrected };

struct PipelineParams {
  BlockParams attn;
  double skip_gain = 1.0;
  std::optional<Mat> B;  // hidden x (N+M)
  Vec bias;              // one entry per row of the ReLU input
  Mat C;                 // 1 x hidden
  bool relu = true;
  Label label = Label::sol1_corrected;
  // positions i >= 2 report C*z / affine_gain + affine_offset (identity unless
  // the table was shifted into the nonnegative range first)
  double affine_gain = 1.0;
  double affine_offset = 0.0;
};

struct PipelineTrace {
  AttentionOutput attn;
  Mat skip;    // attn_t + skip_gain * X
  Mat hidden;  // ReLU output (or skip itself for the linear variant)
  Vec y;
};

inline PipelineTrace trace_pipeline(const PipelineParams& p, const EncodedContext& e) {
  PipelineTrace t;
  t.attn = attention(e, p.attn, true);
  t.skip = apply_skip(t.attn, e, p.skip_gain);
  Mat pre = p.B ? matmul(*p.B, t.skip) : t.skip;
  t.hidden = p.relu ? relu_bias(pre, p.bias) : pre;
  if (p.C.rows() != 1 || p.C.cols() != t.hidden.rows())
    throw ShapeError("run_pipeline: C is " + p.C.shape() + " against hidden " + t.hidden.shape());
  Mat y = matmul(p.C, t.hidden);
  t.y = y.row_vec(0);
  for (std::size_t i = 1; i < t.y.size(); ++i) t.y[i] = t.y[i] / p.affine_gain + p.affine_offset;
  return t;
}

inline Vec run_pipeline(const PipelineParams& p, const EncodedContext& e) { return trace_pipeline(p, e).y; }

namespace detail {
inline Mat reader(std::size_t rows, std::size_t n, std::size_t m, std::size_t col0, const Mat& block) {
  Mat r(rows, n + m);
  r.set_block(0, col0, block);
  return r;
}

inline Mat square_block(std::size_t n, std::size_t m, std::size_t at, const Mat& block) {
  Mat s(n + m, n + m);
  s.set_block(at, at, block);
  return s;
}

inline void require_scale_bound(const QTrueTable& q, double scale) {
  for (double x : q.table.data())
    if (x < 0.0 || x >= scale)
      throw ScaleBoundError("q table entry " + std::to_string(x) + " outside [0, " + std::to_string(scale) +
                            "); shift it with shift_to_nonnegative first");
}

// Standard-normal tables are moved into [0, 0.9 cap) and the map is undone on output.
inline QTrueTable nonnegative_view(const QTrueTable& q, double scale, double& gain, double& offset) {
  gain = 1.0;
  offset = 0.0;
  if (q.mode != QMode::standard_normal) return q;
  QTrueTable s = shift_to_nonnegative(q.table, scale / 2.0);
  gain = s.gain;
  offset = s.offset;
  return s;
}
}  // namespace detail

/// Pair rows in detector order: the N repeated pairs (a, a), then every
/// (a, b) with a != b in lexicographic order.
inline std::vector<std::pair<std::size_t, std::size_t>> solution1_pair_order(std::size_t n) {
  std::vector<std::pair<std::size_t, std::size_t>> order;
  for (std::size_t a = 0; a < n; ++a) order.emplace_back(a, a);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b)
      if (a != b) order.emplace_back(a, b);
  return order;
}

inline PipelineParams build_solution1(const QTrueTable& qt, std::size_t n, std::size_t m, BVariant variant) {
  if (n < 2 || m < 2) throw ConfigError("build_solution1: need N >= 2 and M >= 2");
  if (qt.n() != n) throw ConfigError("build_solution1: table size does not match N");
  PipelineParams p;
  p.label = variant == BVariant::original ? Label::sol1_original : Label::sol1_corrected;
  p.attn.q = detail::reader(m, n, m, n, shift_right(m) * 2.0);
  p.attn.k = detail::reader(m, n, m, n, Mat::identity(m));
  p.attn.v = detail::square_block(n, m, 0, Mat::identity(n));
  p.attn.q_access = p.attn.k_access = Access::positions;
  p.attn.v_access = Access::categories;

  const auto order = solution1_pair_order(n);
  const std::size_t extra = variant == BVariant::corrected ? n * n - n : 0;
  const std::size_t rows = order.size() + extra;
  Mat B(rows, n + m);
  Vec bias(rows);
  Mat C(1, rows);
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto [a, b] = order[r];
    if (a == b) {
      B(r, a) = 3.0;
      bias[r] = -8.0;
    } else {
      B(r, a) = 2.0;
      B(r, b) = 1.0;
      bias[r] = -4.0;
    }
    C(0, r) = qt(a, b);
  }
  // equality detectors: fire only on 3 e_a, where the matching row above fires at 2
  for (std::size_t r = n; r < order.size() && extra > 0; ++r) {
    const auto [a, b] = order[r];
    const std::size_t row = order.size() + (r - n);
    B(row, a) = 2.0;
    B(row, b) = 1.0;
    bias[row] = -5.0;
    C(0, row) = -2.0 * qt(a, b);
  }
  p.B = std::move(B);
  p.bias = std::move(bias);
  p.C = std::move(C);
  return p;
}

/// Digit convention: category c (0-based) stands for digit c, so the output
/// at position i >= 2 is 10 * digit(i-1) + digit(i).
inline PipelineParams build_solution1_linear(std::size_t n, std::size_t m) {
  if (n != 10) throw ConfigError("build_solution1_linear: the digit code needs N = 10");
  if (m < 2) throw ConfigError("build_solution1_linear: need M >= 2");
  PipelineParams p;
  p.label = Label::sol1_linear;
  p.relu = false;
  p.attn.q = detail::reader(m, n, m, n, shift_right(m) * 10.0);
  p.attn.k = detail::reader(m, n, m, n, Mat::identity(m));
  p.attn.v = detail::square_block(n, m, 0, Mat::identity(n));
  p.attn.q_access = p.attn.k_access = Access::positions;
  p.attn.v_access = Access::categories;
  p.C = Mat(1, n + m);
  for (std::size_t c = 0; c < n; ++c) p.C(0, c) = static_cast<double>(c);
  return p;
}

inline PipelineParams build_solution2(const QTrueTable& qt_in, std::size_t n, std::size_t m, double scale = 100.0) {
  if (qt_in.n() != n) throw ConfigError("build_solution2: table size does not match N");
  PipelineParams p;
  const QTrueTable qt = detail::nonnegative_view(qt_in, scale, p.affine_gain, p.affine_offset);
  detail::require_scale_bound(qt, scale);
  p.label = Label::sol2;
  p.attn.k = detail::reader(n, n, m, 0, Mat::identity(n));
  p.attn.q = detail::reader(n, n, m, 0, qt.table);
  p.attn.v = detail::square_block(n, m, n, shift_down(m) * (1.0 / scale));
  p.attn.q_access = p.attn.k_access = Access::categories;
  p.attn.v_access = Access::positions;
  p.bias = Vec(n + m, -1.0);
  p.C = Mat(1, n + m, scale);
  return p;
}

inline PipelineParams build_solution3(const QTrueTable& qt_in, std::size_t n, std::size_t m, double scale = 100.0) {
  if (qt_in.n() != n) throw ConfigError("build_solution3: table size does not match N");
  PipelineParams p;
  const QTrueTable qt = detail::nonnegative_view(qt_in, scale, p.affine_gain, p.affine_offset);
  detail::require_scale_bound(qt, scale);
  p.label = Label::sol3;
  p.attn.k = detail::reader(m, n, m, n, Mat::identity(m));
  p.attn.q = detail::reader(m, n, m, n, shift_right(m));
  p.attn.v = detail::square_block(n, m, 0, qt.table.transposed() * (1.0 / scale));
  p.attn.q_access = p.attn.k_access = Access::positions;
  p.attn.v_access = Access::categories;
  p.bias = Vec(n + m, -1.0);
  p.C = Mat(1, n + m, scale);
  return p;
}

/// Column of attn + X seen by B when the previous category is a and the
/// current one is b (position rows left at zero; B never reads them).
inline Vec pair_column(std::size_t n, std::size_t m, std::size_t a, std::size_t b) {
  Vec col(n + m, 0.0);
  col[a] += 2.0;
  col[b] += 1.0;
  return col;
}

/// C * ReLU(B * col + bias) for a single column.
inline double fully_connected(const PipelineParams& p, const Vec& col) {
  if (!p.B) throw ConfigError("fully_connected: pipeline has no B");
  Mat h = relu_bias(matmul(*p.B, Mat::column(col)), p.bias);
  return matmul(p.C, h)(0, 0);
}

/// Extra output of the original-order B on the repeated pair (a, a).
inline double original_b_leak(const QTrueTable& qt, std::size_t a) {
  double s = 0.0;
  for (std::size_t b = 0; b < qt.n(); ++b)
    if (b != a) s += qt(a, b);
  return 2.0 * s;
}

struct EquivalenceReport {
  Vec lhs;  // diagonal(S X_C^T A2 X_C)
  Vec rhs;  // 1^T ReLU(100 X_C + A2^T X_C D, bias -100)
  double max_abs_diff = 0.0;
};

inline EquivalenceReport check_equivalence_2_3(const QTrueTable& qt, const Mat& xc, double scale = 100.0) {
  detail::require_scale_bound(qt, scale);
  const std::size_t m = xc.cols();
  if (xc.rows() != qt.n()) throw ShapeError("check_equivalence_2_3: X_C is " + xc.shape());
  EquivalenceReport r;
  r.lhs = matmul(matmul(matmul(shift_down(m), xc.transposed()), qt.table), xc).diagonal();
  Mat inner = xc * scale + matmul(matmul(qt.table.transposed(), xc), shift_right(m));
  Mat h = relu_bias(inner, Vec(xc.rows(), -scale));
  r.rhs = matmul(Mat(1, xc.rows(), 1.0), h).row_vec(0);
  r.max_abs_diff = max_abs_diff(r.lhs, r.rhs);
  return r;
}

/// max_i |diag(S X^T A X)_i - diag(X^T A^T X D)_i| for arbitrary real X, A.
inline double transpose_identity_gap(const Mat& x, const Mat& a) {
  const std::size_t m = x.cols();
  Vec lhs = matmul(matmul(matmul(shift_down(m), x.transposed()), a), x).diagonal();
  Vec rhs = matmul(matmul(matmul(x.transposed(), a.transposed()), x), shift_right(m)).diagonal();
  return max_abs_diff(lhs, rhs);
}

}  // namespace attnlab
