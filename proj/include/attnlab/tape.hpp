#pragma once

// Reverse-mode differentiation over whole matrices.
//
// Nodes are appended in evaluation order, which is a topological order, so
// backward() simply walks the node list from the end. Every op records a
// closure that reads its own output gradient and accumulates into its inputs.

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "attnlab/linalg.hpp"

namespace attnlab::ad {

struct Var {
  static constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  std::size_t id = none;
  bool valid() const { return id != none; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Var leaf(Mat value, bool requires_grad = true) { return push(std::move(value), requires_grad, nullptr); }
  Var constant(Mat value) { return push(std::move(value), false, nullptr); }

  Var push(Mat value, bool requires_grad, Backward back) {
    nodes_.push_back({std::move(value), Mat(), requires_grad, std::move(back)});
    return {nodes_.size() - 1};
  }

  const Mat& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  /// Gradient of the last backward() target; zeros if nothing reached v.
  Mat grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    return n.grad.empty() ? Mat(n.value.rows(), n.value.cols()) : n.grad;
  }

  /// Zero-initialized gradient buffer of v, for in-place accumulation.
  Mat& grad_buffer(Var v) {
    auto& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad = Mat(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(Var v, const Mat& g) {
    if (!requires_grad(v)) return;
    auto& n = nodes_.at(v.id);
    if (n.grad.empty())
      n.grad = g;
    else
      n.grad += g;
  }

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and propagates to every node.
  void backward(Var out) {
    if (value(out).rows() != 1 || value(out).cols() != 1) throw ShapeError("backward: output must be 1x1");
    for (auto& n : nodes_) n.grad = Mat();
    grad_buffer(out)(0, 0) = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      auto& n = nodes_[i];
      if (n.back && !n.grad.empty()) n.back(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad;
    Backward back;
  };
  std::vector<Node> nodes_;
};

namespace detail {
inline bool any_grad(const Tape& t, std::initializer_list<Var> vs) {
  for (Var v : vs)
    if (t.requires_grad(v)) return true;
  return false;
}
inline const Mat& out_grad(Tape& t, std::size_t self) { return t.grad_buffer(Var{self}); }
}  // namespace detail

inline Var matmul(Tape& t, Var a, Var b) {
  const Mat& A = t.value(a);
  const Mat& B = t.value(b);
  if (A.cols() != B.rows()) throw ShapeError("matmul: " + A.shape() + " * " + B.shape());
  Mat out(A.rows(), B.cols());
  attnlab::detail::gemm_into(out, A, false, B, false, false);
  return t.push(std::move(out), detail::any_grad(t, {a, b}), [a, b](Tape& t, std::size_t s) {
    const Mat& g = detail::out_grad(t, s);
    if (t.requires_grad(a)) attnlab::detail::gemm_into(t.grad_buffer(a), g, false, t.value(b), true, true);
    if (t.requires_grad(b)) attnlab::detail::gemm_into(t.grad_buffer(b), t.value(a), true, g, false, true);
  });
}

/// a^T b
inline Var matmul_tn(Tape& t, Var a, Var b) {
  const Mat& A = t.value(a);
  const Mat& B = t.value(b);
  if (A.rows() != B.rows()) throw ShapeError("matmul_tn: (" + A.shape() + ")^T * " + B.shape());
  Mat out(A.cols(), B.cols());
  attnlab::detail::gemm_into(out, A, true, B, false, false);
  return t.push(std::move(out), detail::any_grad(t, {a, b}), [a, b](Tape& t, std::size_t s) {
    const Mat& g = detail::out_grad(t, s);
    if (t.requires_grad(a)) attnlab::detail::gemm_into(t.grad_buffer(a), t.value(b), false, g, true, true);
    if (t.requires_grad(b)) attnlab::detail::gemm_into(t.grad_buffer(b), t.value(a), false, g, false, true);
  });
}

inline Var add(Tape& t, Var a, Var b) {
  return t.push(t.value(a) + t.value(b), detail::any_grad(t, {a, b}), [a, b](Tape& t, std::size_t s) {
    const Mat& g = detail::out_grad(t, s);
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var scale(Tape& t, Var a, double c) {
  return t.push(t.value(a) * c, t.requires_grad(a), [a, c](Tape& t, std::size_t s) {
    t.accumulate(a, detail::out_grad(t, s) * c);
  });
}

/// Elementwise product with a fixed matrix (used for parameter masks).
inline Var mask(Tape& t, Var a, const Mat& m) {
  return t.push(t.value(a).hadamard(m), t.requires_grad(a), [a, m](Tape& t, std::size_t s) {
    t.accumulate(a, detail::out_grad(t, s).hadamard(m));
  });
}

/// a + bias * 1^T for a column vector bias.
inline Var add_col_bias(Tape& t, Var a, Var bias) {
  const Mat& x = t.value(a);
  const Mat& b = t.value(bias);
  if (b.rows() != x.rows() || b.cols() != 1) throw ShapeError("add_col_bias: bias " + b.shape() + " vs " + x.shape());
  Mat out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double* row = out.row_ptr(r);
    for (std::size_t c = 0; c < out.cols(); ++c) row[c] += b(r, 0);
  }
  return t.push(std::move(out), detail::any_grad(t, {a, bias}), [a, bias](Tape& t, std::size_t s) {
    const Mat& g = detail::out_grad(t, s);
    t.accumulate(a, g);
    if (t.requires_grad(bias)) {
      Mat& gb = t.grad_buffer(bias);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        const double* row = g.row_ptr(r);
        double acc = 0.0;
        for (std::size_t c = 0; c < g.cols(); ++c) acc += row[c];
        gb(r, 0) += acc;
      }
    }
  });
}

inline Var relu(Tape& t, Var a) {
  Mat out = t.value(a);
  for (double& x : out.data()) x = x > 0.0 ? x : 0.0;
  return t.push(std::move(out), t.requires_grad(a), [a](Tape& t, std::size_t s) {
    Mat g = detail::out_grad(t, s);
    const Mat& y = t.value(Var{s});
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!(y.data()[i] > 0.0)) g.data()[i] = 0.0;
    t.accumulate(a, g);
  });
}

inline Var slice_cols(Tape& t, Var a, std::size_t c0, std::size_t nc) {
  const Mat& x = t.value(a);
  return t.push(x.block(0, c0, x.rows(), nc), t.requires_grad(a), [a, c0](Tape& t, std::size_t s) {
    const Mat& g = detail::out_grad(t, s);
    Mat& ga = t.grad_buffer(a);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c0 + c) += g(r, c);
  });
}

/// Standardizes every column over its rows, then applies per-row gain and
/// shift (column vectors). Either of gain / shift may be an invalid Var.
inline Var layer_norm_cols(Tape& t, Var a, Var gain, Var shift, double eps) {
  const Mat& x = t.value(a);
  const std::size_t d = x.rows(), cols = x.cols();
  if (d < 2) throw ShapeError("layer_norm_cols: need at least 2 rows");
  const double dd = static_cast<double>(d);
  // row-wise passes keep the memory access contiguous
  Vec mean(cols, 0.0), inv(cols, 0.0);
  for (std::size_t r = 0; r < d; ++r) {
    const double* row = x.row_ptr(r);
    for (std::size_t c = 0; c < cols; ++c) mean[c] += row[c];
  }
  for (double& v : mean) v /= dd;
  for (std::size_t r = 0; r < d; ++r) {
    const double* row = x.row_ptr(r);
    for (std::size_t c = 0; c < cols; ++c) inv[c] += (row[c] - mean[c]) * (row[c] - mean[c]);
  }
  for (double& v : inv) v = 1.0 / std::sqrt(v / dd + eps);
  Mat xhat(d, cols), out(d, cols);
  for (std::size_t r = 0; r < d; ++r) {
    const double* row = x.row_ptr(r);
    double* h = xhat.row_ptr(r);
    double* o = out.row_ptr(r);
    const double gr = gain.valid() ? t.value(gain)(r, 0) : 1.0;
    const double sr = shift.valid() ? t.value(shift)(r, 0) : 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      h[c] = (row[c] - mean[c]) * inv[c];
      o[c] = gr * h[c] + sr;
    }
  }
  const bool rg = t.requires_grad(a) || (gain.valid() && t.requires_grad(gain)) || (shift.valid() && t.requires_grad(shift));
  return t.push(std::move(out), rg, [a, gain, shift, xhat = std::move(xhat), inv = std::move(inv)](Tape& t, std::size_t s) {
    const Mat& g = detail::out_grad(t, s);
    const std::size_t d = g.rows(), cols = g.cols();
    const double dd = static_cast<double>(d);
    if (gain.valid() && t.requires_grad(gain)) {
      Mat& gg = t.grad_buffer(gain);
      for (std::size_t r = 0; r < d; ++r) {
        const double* gr = g.row_ptr(r);
        const double* h = xhat.row_ptr(r);
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += gr[c] * h[c];
        gg(r, 0) += acc;
      }
    }
    if (shift.valid() && t.requires_grad(shift)) {
      Mat& gs = t.grad_buffer(shift);
      for (std::size_t r = 0; r < d; ++r) {
        const double* gr = g.row_ptr(r);
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += gr[c];
        gs(r, 0) += acc;
      }
    }
    if (!t.requires_grad(a)) return;
    Vec m1(cols, 0.0), m2(cols, 0.0);
    for (std::size_t r = 0; r < d; ++r) {
      const double gr = gain.valid() ? t.value(gain)(r, 0) : 1.0;
      const double* grow = g.row_ptr(r);
      const double* h = xhat.row_ptr(r);
      for (std::size_t c = 0; c < cols; ++c) {
        m1[c] += gr * grow[c];
        m2[c] += gr * grow[c] * h[c];
      }
    }
    Mat& ga = t.grad_buffer(a);
    for (std::size_t r = 0; r < d; ++r) {
      const double gr = gain.valid() ? t.value(gain)(r, 0) : 1.0;
      const double* grow = g.row_ptr(r);
      const double* h = xhat.row_ptr(r);
      double* out = ga.row_ptr(r);
      for (std::size_t c = 0; c < cols; ++c) out[c] += inv[c] * (gr * grow[c] - m1[c] / dd - h[c] * m2[c] / dd);
    }
  });
}

/// Token layout shared by the one-hot ops: cats[b * m + i] is the 0-based
/// category at position i of context b; block b owns columns b*m .. b*m+m-1.
struct OneHotLayout {
  const std::vector<int>* cats = nullptr;
  std::size_t n = 0;
  std::size_t m = 0;
  std::size_t contexts() const { return cats->size() / m; }
  std::size_t cat(std::size_t b, std::size_t i) const { return static_cast<std::size_t>((*cats)[b * m + i]); }
};

/// Block b of the output is the M x M score matrix X_b^T G X_b of the
/// one-hot encoded context b, entries (j, i) with j > i set to zero when
/// causal. Equivalent to matmul_tn(X, matmul(G, X)) per block.
inline Var onehot_scores(Tape& t, Var g, OneHotLayout L, bool causal) {
  const Mat& G = t.value(g);
  const std::size_t n = L.n, m = L.m, nb = L.contexts();
  if (G.rows() != n + m || G.cols() != n + m) throw ShapeError("onehot_scores: G is " + G.shape());
  Mat out(m, m * nb);
  for (std::size_t j = 0; j < m; ++j) {
    const double* gpos = G.row_ptr(n + j);
    double* orow = out.row_ptr(j);
    for (std::size_t b = 0; b < nb; ++b) {
      const double* gcat = G.row_ptr(L.cat(b, j));
      for (std::size_t i = causal ? j : 0; i < m; ++i) {
        const std::size_t ci = L.cat(b, i);
        orow[b * m + i] = gcat[ci] + gcat[n + i] + gpos[ci] + gpos[n + i];
      }
    }
  }
  return t.push(std::move(out), t.requires_grad(g), [g, L, causal](Tape& t, std::size_t s) {
    const Mat& dy = detail::out_grad(t, s);
    Mat& dG = t.grad_buffer(g);
    const std::size_t n = L.n, m = L.m;
    for (std::size_t j = 0; j < m; ++j) {
      const double* drow = dy.row_ptr(j);
      double* gpos = dG.row_ptr(n + j);
      for (std::size_t b = 0; b < L.contexts(); ++b) {
        double* gcat = dG.row_ptr(L.cat(b, j));
        for (std::size_t i = causal ? j : 0; i < m; ++i) {
          const std::size_t ci = L.cat(b, i);
          const double v = drow[b * m + i];
          gcat[ci] += v;
          gcat[n + i] += v;
          gpos[ci] += v;
          gpos[n + i] += v;
        }
      }
    }
  });
}

/// Causal column softmax applied to every M x M block.
inline Var causal_softmax_blocks(Tape& t, Var a, std::size_t m) {
  const Mat& x = t.value(a);
  if (x.rows() != m || x.cols() % m != 0) throw ShapeError("causal_softmax_blocks: input " + x.shape());
  Mat out(m, x.cols());
  for (std::size_t b = 0; b < x.cols() / m; ++b) {
    Mat w = softmax_causal_columns(x.block(0, b * m, m, m));
    out.set_block(0, b * m, w);
  }
  return t.push(std::move(out), t.requires_grad(a), [a, m](Tape& t, std::size_t s) {
    const Mat& dy = detail::out_grad(t, s);
    const Mat& y = t.value(Var{s});
    Mat& ga = t.grad_buffer(a);
    for (std::size_t col = 0; col < y.cols(); ++col) {
      const std::size_t i = col % m;
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) dot += dy(j, col) * y(j, col);
      for (std::size_t j = 0; j <= i; ++j) ga(j, col) += y(j, col) * (dy(j, col) - dot);
    }
  });
}

/// Block b of the output is X_b * W_b: column i collects sum_j W_b(j, i) X_j,
/// so the category rows receive a scatter and the position rows copy W_b.
inline Var onehot_mix(Tape& t, Var w, OneHotLayout L) {
  const Mat& W = t.value(w);
  const std::size_t n = L.n, m = L.m, nb = L.contexts();
  if (W.rows() != m || W.cols() != m * nb) throw ShapeError("onehot_mix: W is " + W.shape());
  Mat out(n + m, m * nb);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t cj = L.cat(b, j);
      const double* wrow = W.row_ptr(j) + b * m;
      double* crow = out.row_ptr(cj) + b * m;
      double* prow = out.row_ptr(n + j) + b * m;
      for (std::size_t i = 0; i < m; ++i) {
        crow[i] += wrow[i];
        prow[i] = wrow[i];
      }
    }
  return t.push(std::move(out), t.requires_grad(w), [w, L](Tape& t, std::size_t s) {
    const Mat& dy = detail::out_grad(t, s);
    Mat& dW = t.grad_buffer(w);
    const std::size_t n = L.n, m = L.m;
    for (std::size_t b = 0; b < L.contexts(); ++b)
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t cj = L.cat(b, j);
        const double* crow = dy.row_ptr(cj) + b * m;
        const double* prow = dy.row_ptr(n + j) + b * m;
        double* wrow = dW.row_ptr(j) + b * m;
        for (std::size_t i = 0; i < m; ++i) wrow[i] += crow[i] + prow[i];
      }
  });
}

/// out = zeros except rows r0..r0+sz-1, which hold v[r0:, r0:] (sz x sz) times
/// x[r0:, :]. With r0 = 0 and sz = rows(v) this is the plain product.
inline Var block_matmul(Tape& t, Var v, Var x, std::size_t r0, std::size_t sz) {
  const Mat& V = t.value(v);
  const Mat& X = t.value(x);
  if (V.rows() != X.rows() || V.cols() != V.rows() || r0 + sz > V.rows()) throw ShapeError("block_matmul: shapes");
  if (r0 == 0 && sz == V.rows()) return matmul(t, v, x);
  Mat out(X.rows(), X.cols());
  out.set_block(r0, 0, attnlab::matmul(V.block(r0, r0, sz, sz), X.block(r0, 0, sz, X.cols())));
  return t.push(std::move(out), detail::any_grad(t, {v, x}), [v, x, r0, sz](Tape& t, std::size_t s) {
    const Mat& dy = detail::out_grad(t, s);
    const Mat gb = dy.block(r0, 0, sz, dy.cols());
    if (t.requires_grad(v)) {
      Mat& gv = t.grad_buffer(v);
      gv.set_block(r0, r0, gv.block(r0, r0, sz, sz) + matmul_nt(gb, t.value(x).block(r0, 0, sz, dy.cols())));
    }
    if (t.requires_grad(x)) {
      Mat& gx = t.grad_buffer(x);
      const Mat add = matmul_tn(t.value(v).block(r0, r0, sz, sz), gb);
      for (std::size_t r = 0; r < sz; ++r) {
        const double* src = add.row_ptr(r);
        double* dst = gx.row_ptr(r0 + r);
        for (std::size_t c = 0; c < add.cols(); ++c) dst[c] += src[c];
      }
    }
  });
}

/// sum_c w_c (y_c - target_c)^2 / denom for a 1 x C prediction row.
inline Var weighted_sse(Tape& t, Var y, const Vec& target, const Vec& weight, double denom) {
  const Mat& Y = t.value(y);
  if (Y.rows() != 1 || Y.cols() != target.size() || weight.size() != target.size())
    throw ShapeError("weighted_sse: prediction " + Y.shape());
  double acc = 0.0;
  for (std::size_t c = 0; c < target.size(); ++c) {
    const double r = Y(0, c) - target[c];
    acc += weight[c] * r * r;
  }
  Mat out(1, 1, acc / denom);
  out.require_finite("weighted_sse");
  return t.push(std::move(out), t.requires_grad(y), [y, target, weight, denom](Tape& t, std::size_t s) {
    const double g = detail::out_grad(t, s)(0, 0);
    Mat& gy = t.grad_buffer(y);
    const Mat& Y = t.value(y);
    for (std::size_t c = 0; c < target.size(); ++c) gy(0, c) += g * 2.0 * weight[c] * (Y(0, c) - target[c]) / denom;
  });
}

}  // namespace attnlab::ad
