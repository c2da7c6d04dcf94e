#pragma once

// The trainable one-level model:
//   H  = v X W + X            (W the causal bilinear scores of k^T q)
//   Hn = LayerNorm(H)         (per column, trainable gain / shift)
//   y  = W2 ReLU(W1 Hn + b1) + b2
// trained on the squared error of positions 2..M.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "attnlab/context.hpp"
#include "attnlab/linalg.hpp"
#include "attnlab/solutions.hpp"
#include "attnlab/tape.hpp"

namespace attnlab {

enum class Flavor { sol1, sol2, sol3, free };

inline std::string to_string(Flavor f) {
  switch (f) {
    case Flavor::sol1: return "sol1";
    case Flavor::sol2: return "sol2";
    case Flavor::sol3: return "sol3";
    case Flavor::free: return "free";
  }
  return "?";
}

inline Flavor parse_flavor(const std::string& s) {
  if (s == "sol1") return Flavor::sol1;
  if (s == "sol2") return Flavor::sol2;
  if (s == "sol3") return Flavor::sol3;
  if (s == "free") return Flavor::free;
  throw ConfigError("unknown flavor '" + s + "' (expected sol1, sol2, sol3 or free)");
}

enum class NormMode { layer_norm, bypass };

struct ModelConfig {
  std::size_t n = 10;
  std::size_t m = 50;
  std::size_t hidden = 190;
  Flavor flavor = Flavor::free;
  bool softmax = false;
  NormMode norm = NormMode::layer_norm;
  double ln_eps = 1e-5;

  std::size_t d() const { return n + m; }

  void validate() const {
    if (n < 2 || m < 2) throw ConfigError("model: need N >= 2 and M >= 2");
    if (hidden == 0) throw ConfigError("model: hidden width must be positive");
    if (!(ln_eps > 0.0)) throw ConfigError("model: layer-norm eps must be positive");
    const std::size_t need = flavor == Flavor::sol1 ? 2 * n * n - n : flavor == Flavor::free ? 1 : n + m;
    if (hidden < need)
      throw ConfigError("model: flavor " + to_string(flavor) + " needs hidden width >= " + std::to_string(need) +
                        " to contain its handcrafted solution, got " + std::to_string(hidden));
  }
};

struct ModelParams {
  Mat q, k, v;      // D x D each
  Mat gain, shift;  // D x 1
  Mat W1, b1;       // hidden x D, hidden x 1
  Mat W2, b2;       // 1 x hidden, 1 x 1

  static constexpr std::size_t count = 9;
  static constexpr const char* names[count] = {"q", "k", "v", "gain", "shift", "W1", "b1", "W2", "b2"};

  std::array<Mat*, count> tensors() { return {&q, &k, &v, &gain, &shift, &W1, &b1, &W2, &b2}; }
  std::array<const Mat*, count> tensors() const { return {&q, &k, &v, &gain, &shift, &W1, &b1, &W2, &b2}; }

  std::size_t size() const {
    std::size_t s = 0;
    for (const Mat* t : tensors()) s += t->size();
    return s;
  }

  Vec flatten() const {
    Vec out;
    out.reserve(size());
    for (const Mat* t : tensors()) out.insert(out.end(), t->data().begin(), t->data().end());
    return out;
  }

  void assign(const Vec& x) {
    if (x.size() != size()) throw ShapeError("ModelParams::assign: wrong length");
    std::size_t o = 0;
    for (Mat* t : tensors()) {
      std::copy(x.begin() + static_cast<std::ptrdiff_t>(o), x.begin() + static_cast<std::ptrdiff_t>(o + t->size()),
                t->data().begin());
      o += t->size();
    }
  }

  ModelParams zeros_like() const {
    ModelParams z = *this;
    for (Mat* t : z.tensors()) *t = Mat(t->rows(), t->cols());
    return z;
  }

  bool all_finite() const {
    for (const Mat* t : tensors())
      if (!t->all_finite()) return false;
    return true;
  }
};

struct FlavorMasks {
  Mat qk;  // shared by q and k: which input columns they may read
  Mat v;
};

/// sol1: q, k read positions, v is diagonal on categories.
/// sol3: q, k read positions, v maps categories to categories.
/// sol2: q, k read categories, v maps positions to positions.
inline FlavorMasks flavor_masks(const ModelConfig& c) {
  const std::size_t d = c.d(), n = c.n;
  FlavorMasks f{Mat(d, d, 1.0), Mat(d, d, 1.0)};
  if (c.flavor == Flavor::free) return f;
  f.v = Mat(d, d);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t col = 0; col < d; ++col) {
      const bool cat_col = col < n;
      switch (c.flavor) {
        case Flavor::sol1:
          f.qk(r, col) = cat_col ? 0.0 : 1.0;
          f.v(r, col) = (r == col && r < n) ? 1.0 : 0.0;
          break;
        case Flavor::sol3:
          f.qk(r, col) = cat_col ? 0.0 : 1.0;
          f.v(r, col) = (r < n && cat_col) ? 1.0 : 0.0;
          break;
        case Flavor::sol2:
          f.qk(r, col) = cat_col ? 1.0 : 0.0;
          f.v(r, col) = (r >= n && !cat_col) ? 1.0 : 0.0;
          break;
        case Flavor::free: break;
      }
    }
  return f;
}

inline void apply_masks(ModelParams& p, const ModelConfig& c) {
  const FlavorMasks f = flavor_masks(c);
  p.q = p.q.hadamard(f.qk);
  p.k = p.k.hadamard(f.qk);
  p.v = p.v.hadamard(f.v);
}

/// q, k, v, W1 ~ N(0, 1/D), W2 ~ N(0, 1/hidden), gain 1, everything else 0.
inline ModelParams init_params(const ModelConfig& c, Rng& rng) {
  c.validate();
  const std::size_t d = c.d(), h = c.hidden;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  ModelParams p;
  p.q = rng.normal_matrix(d, d, s);
  p.k = rng.normal_matrix(d, d, s);
  p.v = rng.normal_matrix(d, d, s);
  p.gain = Mat(d, 1, 1.0);
  p.shift = Mat(d, 1);
  p.W1 = rng.normal_matrix(h, d, s);
  p.b1 = Mat(h, 1);
  p.W2 = rng.normal_matrix(1, h, 1.0 / std::sqrt(static_cast<double>(h)));
  p.b2 = Mat(1, 1);
  apply_masks(p, c);
  return p;
}

/// Contexts flattened for the one-hot ops plus the loss targets. Position 1
/// carries weight 0, positions 2..M weight 1.
struct Batch {
  std::size_t n = 0, m = 0;
  std::vector<int> cats;
  Vec target;
  Vec weight;

  std::size_t size() const { return m == 0 ? 0 : cats.size() / m; }
  double weight_total() const { return static_cast<double>(size() * (m - 1)); }
};

inline Batch make_batch(const std::vector<TokenSequence>& contexts, const QTrueTable& qt) {
  if (contexts.empty()) throw ConfigError("make_batch: empty batch");
  Batch b;
  b.n = contexts.front().n;
  b.m = contexts.front().cat.size();
  if (qt.n() != b.n) throw ConfigError("make_batch: table size does not match N");
  for (const auto& t : contexts) {
    if (t.n != b.n || t.cat.size() != b.m) throw ShapeError("make_batch: contexts differ in N or M");
    const Vec y = targets(t, qt);
    for (std::size_t i = 0; i < b.m; ++i) {
      b.cats.push_back(static_cast<int>(t.cat[i]));
      b.target.push_back(y[i]);
      b.weight.push_back(i == 0 ? 0.0 : 1.0);
    }
  }
  return b;
}

/// Recorded forward pass over contexts [first, first + count) of a batch.
struct Forward {
  ad::Tape tape;
  std::array<ad::Var, ModelParams::count> leaves;
  ad::Var pre;   // hidden pre-activations, hidden x (count * M)
  ad::Var y;     // 1 x (count * M) predictions
  ad::Var loss;  // weighted SSE divided by `denom`
  std::vector<int> cats;
};

inline Mat encode_cats(const std::vector<int>& cats, std::size_t n, std::size_t m) {
  const std::size_t nb = cats.size() / m;
  Mat x(n + m, nb * m);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < m; ++i) {
      x(static_cast<std::size_t>(cats[b * m + i]), b * m + i) = 1.0;
      x(n + i, b * m + i) = 1.0;
    }
  return x;
}

/// Records the forward pass. `denom` normalizes the loss so that per-chunk
/// losses add up to the batch mean.
inline std::unique_ptr<Forward> forward(const ModelParams& p, const ModelConfig& c, const Batch& batch, std::size_t first,
                                        std::size_t count, double denom, bool requires_grad = true) {
  if (batch.n != c.n || batch.m != c.m) throw ShapeError("forward: batch does not match model N, M");
  if (first + count > batch.size() || count == 0) throw ShapeError("forward: context range out of bounds");
  const std::size_t n = c.n, m = c.m, d = c.d();
  auto f = std::make_unique<Forward>();
  auto& t = f->tape;
  const auto ts = p.tensors();
  for (std::size_t i = 0; i < ModelParams::count; ++i) f->leaves[i] = t.leaf(*ts[i], requires_grad);
  const auto [q, k, v, gain, shift, W1, b1, W2, b2] = f->leaves;

  f->cats.assign(batch.cats.begin() + static_cast<std::ptrdiff_t>(first * m),
                 batch.cats.begin() + static_cast<std::ptrdiff_t>((first + count) * m));
  const ad::OneHotLayout L{&f->cats, n, m};
  const ad::Var X = t.constant(encode_cats(f->cats, n, m));

  const FlavorMasks fm = flavor_masks(c);
  ad::Var qm = q, km = k, vm = v;
  if (c.flavor != Flavor::free) {
    qm = ad::mask(t, q, fm.qk);
    km = ad::mask(t, k, fm.qk);
    vm = ad::mask(t, v, fm.v);
  }
  const ad::Var G = ad::matmul_tn(t, km, qm);
  ad::Var W = ad::onehot_scores(t, G, L, true);
  if (c.softmax) W = ad::causal_softmax_blocks(t, ad::scale(t, W, 1.0 / std::sqrt(static_cast<double>(d))), m);
  const ad::Var XW = ad::onehot_mix(t, W, L);
  ad::Var A;
  switch (c.flavor) {
    case Flavor::sol1:
    case Flavor::sol3: A = ad::block_matmul(t, vm, XW, 0, n); break;
    case Flavor::sol2: A = ad::block_matmul(t, vm, XW, n, m); break;
    case Flavor::free: A = ad::matmul(t, vm, XW); break;
  }
  ad::Var H = ad::add(t, A, X);
  if (c.norm == NormMode::layer_norm) H = ad::layer_norm_cols(t, H, gain, shift, c.ln_eps);
  f->pre = ad::add_col_bias(t, ad::matmul(t, W1, H), b1);
  const ad::Var Z = ad::relu(t, f->pre);
  f->y = ad::add_col_bias(t, ad::matmul(t, W2, Z), b2);

  const auto off = static_cast<std::ptrdiff_t>(first * m), len = static_cast<std::ptrdiff_t>(count * m);
  const Vec target(batch.target.begin() + off, batch.target.begin() + off + len);
  const Vec weight(batch.weight.begin() + off, batch.weight.begin() + off + len);
  f->loss = ad::weighted_sse(t, f->y, target, weight, denom);
  return f;
}

/// Gradient of the recorded loss with respect to every parameter tensor.
inline ModelParams backward(Forward& f, const ModelParams& shape) {
  f.tape.backward(f.loss);
  ModelParams g = shape.zeros_like();
  const auto ts = g.tensors();
  for (std::size_t i = 0; i < ModelParams::count; ++i) *ts[i] = f.tape.grad(f.leaves[i]);
  return g;
}

/// Worker count: ATTNLAB_THREADS if set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
inline std::size_t worker_count() {
  if (const char* env = std::getenv("ATTNLAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
    throw ConfigError("ATTNLAB_THREADS must be a positive integer, got '" + std::string(env) + "'");
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

struct LossGrad {
  double loss = 0.0;
  ModelParams grad;
};

/// Batch-mean loss over positions 2..M and, when `with_grad`, its gradient.
/// The batch is split into chunks of `chunk` contexts; chunk results are
/// summed in chunk order, so the result does not depend on `threads`.
inline LossGrad loss_and_grad(const ModelParams& p, const ModelConfig& c, const Batch& batch, bool with_grad = true,
                              std::size_t threads = 1, std::size_t chunk = 10) {
  if (chunk == 0) throw ConfigError("loss_and_grad: chunk must be positive");
  const std::size_t nchunks = (batch.size() + chunk - 1) / chunk;
  const double denom = batch.weight_total();
  std::vector<double> losses(nchunks, 0.0);
  std::vector<ModelParams> grads(with_grad ? nchunks : 0);
  std::vector<std::exception_ptr> errors(nchunks);

  auto run = [&](std::size_t ci) {
    try {
      const std::size_t first = ci * chunk, count = std::min(chunk, batch.size() - first);
      auto f = forward(p, c, batch, first, count, denom, with_grad);
      losses[ci] = f->tape.value(f->loss)(0, 0);
      if (with_grad) grads[ci] = backward(*f, p);
    } catch (...) {
      errors[ci] = std::current_exception();
    }
  };
  const std::size_t nw = std::min(std::max<std::size_t>(threads, 1), nchunks);
  if (nw == 1) {
    for (std::size_t ci = 0; ci < nchunks; ++ci) run(ci);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < nw; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t ci = w; ci < nchunks; ci += nw) run(ci);
      });
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  LossGrad out;
  out.grad = with_grad ? p.zeros_like() : ModelParams{};
  for (std::size_t ci = 0; ci < nchunks; ++ci) {
    out.loss += losses[ci];
    if (with_grad) {
      const auto dst = out.grad.tensors();
      const auto src = grads[ci].tensors();
      for (std::size_t i = 0; i < ModelParams::count; ++i) *dst[i] += *src[i];
    }
  }
  if (!std::isfinite(out.loss)) throw NonFiniteError("loss is not finite");
  return out;
}

/// Sign pattern of every hidden pre-activation over the batch.
inline std::vector<char> relu_pattern(const ModelParams& p, const ModelConfig& c, const Batch& batch, std::size_t chunk = 10) {
  std::vector<char> out;
  for (std::size_t first = 0; first < batch.size(); first += chunk) {
    auto f = forward(p, c, batch, first, std::min(chunk, batch.size() - first), 1.0, false);
    for (double v : f->tape.value(f->pre).data()) out.push_back(v > 0.0 ? 1 : 0);
  }
  return out;
}

struct ModelGradcheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
  std::size_t kinks_skipped = 0;  // probes whose +-h step flipped a ReLU
  std::string worst;              // tensor(row,col) of the largest error
};

/// Central differences at `coords` random unmasked coordinates. The relative
/// error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-5); the floor sits
/// above the roundoff of central differences at h = 1e-5 (about 1e-11 absolute
/// for O(1) losses). A probe
/// whose +-h perturbation changes any ReLU's sign is a kink crossing, where
/// central differences do not estimate the derivative; it is redrawn.
inline ModelGradcheck gradcheck_model(const ModelParams& p, const ModelConfig& c, const Batch& batch, std::size_t coords,
                                      double h, Rng& rng) {
  const FlavorMasks fm = flavor_masks(c);
  const std::array<const Mat*, ModelParams::count> masks = {&fm.qk, &fm.qk, &fm.v, nullptr, nullptr,
                                                            nullptr, nullptr, nullptr, nullptr};
  std::vector<std::pair<std::size_t, std::size_t>> free;  // (tensor, flat index)
  const auto ts = p.tensors();
  for (std::size_t t = 0; t < ModelParams::count; ++t)
    for (std::size_t i = 0; i < ts[t]->size(); ++i)
      if (!masks[t] || masks[t]->data()[i] != 0.0) free.emplace_back(t, i);

  const ModelParams g = loss_and_grad(p, c, batch, true, 1).grad;
  const auto gs = g.tensors();
  const std::vector<char> base = relu_pattern(p, c, batch);
  ModelGradcheck res;
  const std::size_t max_draws = coords * 20;
  for (std::size_t draw = 0; res.checked < coords && draw < max_draws; ++draw) {
    const auto [t, i] = free[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(free.size()) - 1))];
    ModelParams plus = p, minus = p;
    plus.tensors()[t]->data()[i] += h;
    minus.tensors()[t]->data()[i] -= h;
    if (relu_pattern(plus, c, batch) != base || relu_pattern(minus, c, batch) != base) {
      ++res.kinks_skipped;
      continue;
    }
    const double fd = (loss_and_grad(plus, c, batch, false).loss - loss_and_grad(minus, c, batch, false).loss) / (2.0 * h);
    const double an = gs[t]->data()[i];
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-5});
    ++res.checked;
    if (rel >= res.max_rel) {
      res.max_rel = rel;
      const std::size_t cols = ts[t]->cols();
      res.worst = std::string(ModelParams::names[t]) + "(" + std::to_string(i / cols + 1) + "," +
                  std::to_string(i % cols + 1) + ")";
    }
  }
  if (res.checked < coords) throw NonFiniteError("gradcheck_model: too many kink crossings; use a smaller h");
  return res;
}

/// Per-position predictions for one context.
inline Vec predict(const ModelParams& p, const ModelConfig& c, const TokenSequence& t) {
  Batch b;
  b.n = t.n;
  b.m = t.cat.size();
  for (std::size_t i = 0; i < b.m; ++i) {
    b.cats.push_back(static_cast<int>(t.cat[i]));
    b.target.push_back(0.0);
    b.weight.push_back(0.0);
  }
  auto f = forward(p, c, b, 0, 1, 1.0, false);
  return f->tape.value(f->y).row_vec(0);
}

/// Model parameters reproducing a handcrafted pipeline exactly. Needs the
/// normalization bypassed (NormMode::bypass) and a hidden width at least the
/// pipeline's ReLU width; positions 2..M then match the pipeline output.
inline ModelParams plant_solution(const PipelineParams& s, const ModelConfig& c) {
  c.validate();
  if (!s.relu) throw ConfigError("plant_solution: the linear variant has no ReLU layer to plant");
  const std::size_t d = c.d(), h = c.hidden;
  if (s.attn.q.cols() != d || s.attn.v.rows() != d) throw ShapeError("plant_solution: pipeline built for other N, M");
  if (s.attn.softmax != c.softmax) throw ConfigError("plant_solution: softmax setting differs");
  if (s.skip_gain != 1.0) throw ConfigError("plant_solution: the model's skip gain is fixed at 1");
  const Mat B = s.B ? *s.B : Mat::identity(d);
  if (B.rows() > h) throw ConfigError("plant_solution: hidden width " + std::to_string(h) + " below " + std::to_string(B.rows()));
  if (s.attn.q.rows() > d) throw ConfigError("plant_solution: attention width exceeds D");

  ModelParams p;
  p.q = Mat(d, d);
  p.k = Mat(d, d);
  p.q.set_block(0, 0, s.attn.q_eff(c.n));
  p.k.set_block(0, 0, s.attn.k_eff(c.n));
  p.v = s.attn.v_eff(c.n);
  p.gain = Mat(d, 1, 1.0);
  p.shift = Mat(d, 1);
  p.W1 = Mat(h, d);
  p.W1.set_block(0, 0, B);
  p.b1 = Mat(h, 1);
  for (std::size_t r = 0; r < s.bias.size(); ++r) p.b1(r, 0) = s.bias[r];
  p.W2 = Mat(1, h);
  for (std::size_t r = 0; r < B.rows(); ++r) p.W2(0, r) = s.C(0, r) / s.affine_gain;
  p.b2 = Mat(1, 1, s.affine_offset);
  return p;
}

}  // namespace attnlab
