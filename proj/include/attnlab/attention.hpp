#pragma once

// Single-head attention in the column convention: X is (N+M) x M, one token
// per column, and the transposed attention output is v * X * W with
// W(j, i) = X_j^T k^T q X_i.

#include <fstream>
#include <string>

#include "attnlab/context.hpp"
#include "attnlab/linalg.hpp"

namespace attnlab {

enum class Access { categories, positions, full };

inline std::string to_string(Access a) {
  switch (a) {
    case Access::categories: return "categories";
    case Access::positions: return "positions";
    case Access::full: return "full";
  }
  return "?";
}

/// Zeroes the columns of a (rows x (N+M)) reader that fall outside its block.
inline Mat mask_reader(Mat m, Access a, std::size_t n) {
  if (a == Access::full) return m;
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c)
      if ((a == Access::categories) != (c < n)) m(r, c) = 0.0;
  return m;
}

/// Zeroes everything of an (N+M) x (N+M) map outside its diagonal block: a
/// categories-only map reads and writes the category rows, positions-only the
/// position rows.
inline Mat mask_square(Mat m, Access a, std::size_t n) {
  if (a == Access::full) return m;
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) {
      const bool keep = a == Access::categories ? (r < n && c < n) : (r >= n && c >= n);
      if (!keep) m(r, c) = 0.0;
    }
  return m;
}

struct BlockParams {
  Mat q;  // d x (N+M)
  Mat k;  // d x (N+M)
  Mat v;  // (N+M) x (N+M)
  Access q_access = Access::full;
  Access k_access = Access::full;
  Access v_access = Access::full;
  bool softmax = false;
  double scale = 1.0;  // softmax scores are divided by this

  Mat q_eff(std::size_t n) const { return mask_reader(q, q_access, n); }
  Mat k_eff(std::size_t n) const { return mask_reader(k, k_access, n); }
  Mat v_eff(std::size_t n) const { return mask_square(v, v_access, n); }
  Mat ktq(std::size_t n) const { return matmul_tn(k_eff(n), q_eff(n)); }
};

struct AttentionOutput {
  Mat attn_t;   // (N+M) x M
  Mat weights;  // M x M, column i holds the weights of sources j
};

namespace detail {
inline void check_shapes(const EncodedContext& e, const BlockParams& p) {
  const std::size_t d = e.n + e.m;
  if (e.X.rows() != d || e.X.cols() != e.m) throw ShapeError("attention: X is " + e.X.shape());
  if (p.q.cols() != d || p.k.cols() != d || p.q.rows() != p.k.rows())
    throw ShapeError("attention: q " + p.q.shape() + ", k " + p.k.shape() + " against X " + e.X.shape());
  if (p.v.rows() != d || p.v.cols() != d) throw ShapeError("attention: v " + p.v.shape() + " against X " + e.X.shape());
}

inline Mat raw_scores(const EncodedContext& e, const BlockParams& p) {
  return matmul_tn(matmul(p.k_eff(e.n), e.X), matmul(p.q_eff(e.n), e.X));
}
}  // namespace detail

/// Attention without the softmax: weights are the raw bilinear scores.
inline AttentionOutput attention_star(const EncodedContext& e, const BlockParams& p, bool causal = true) {
  if (p.softmax) throw ConfigError("attention_star: params request softmax");
  detail::check_shapes(e, p);
  Mat w = detail::raw_scores(e, p);
  if (causal)
    for (std::size_t j = 0; j < e.m; ++j)
      for (std::size_t i = 0; i < j; ++i) w(j, i) = 0.0;
  Mat a = matmul(matmul(p.v_eff(e.n), e.X), w);
  return {std::move(a), std::move(w)};
}

inline AttentionOutput attention_softmax(const EncodedContext& e, const BlockParams& p, bool causal = true) {
  if (!p.softmax) throw ConfigError("attention_softmax: params do not request softmax");
  if (!(p.scale > 0.0)) throw ConfigError("attention_softmax: scale must be positive");
  detail::check_shapes(e, p);
  Mat s = detail::raw_scores(e, p) * (1.0 / p.scale);
  Mat w = causal ? softmax_causal_columns(s) : softmax_columns(s);
  Mat a = matmul(matmul(p.v_eff(e.n), e.X), w);
  return {std::move(a), std::move(w)};
}

inline AttentionOutput attention(const EncodedContext& e, const BlockParams& p, bool causal = true) {
  return p.softmax ? attention_softmax(e, p, causal) : attention_star(e, p, causal);
}

inline Mat apply_skip(const AttentionOutput& a, const EncodedContext& e, double gain) {
  return a.attn_t + e.X * gain;
}

inline void write_weights_csv(const std::string& path, const Mat& w) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out.precision(17);
  out << "row,col,value\n";
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) out << r + 1 << ',' << c + 1 << ',' << w(r, c) << '\n';
}

}  // namespace attnlab
