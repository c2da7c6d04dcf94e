#pragma once

#include <chrono>
#include <fstream>
#include <string>
#include <vector>

#include "attnlab/context.hpp"
#include "attnlab/model.hpp"
#include "attnlab/optim.hpp"

namespace attnlab {

struct TrainConfig {
  std::size_t n = 10;
  std::size_t m = 50;
  std::size_t batch = 1000;
  std::size_t iterations = 50;
  std::size_t inner = 10;  // optimizer steps per iteration (one fresh batch each iteration)
  std::size_t hidden = 190;
  Flavor flavor = Flavor::free;
  Optimizer optimizer = Optimizer::quasi_newton;
  std::uint64_t seed = 1;
  bool softmax = false;
  // > 0 trains without hard masks and charges this weight times the squared
  // norm of the entries the flavor forbids
  double penalty = 0.0;
  bool fixed_batch = false;
  std::size_t threads = 0;  // 0: worker_count()
  std::size_t chunk = 10;

  ModelConfig model() const {
    ModelConfig c;
    c.n = n;
    c.m = m;
    c.hidden = hidden;
    c.flavor = penalty > 0.0 ? Flavor::free : flavor;
    c.softmax = softmax;
    return c;
  }

  void validate() const {
    if (batch == 0 || iterations == 0 || inner == 0 || chunk == 0)
      throw ConfigError("train: batch, iterations, inner and chunk must be positive");
    if (!(penalty >= 0.0) || !std::isfinite(penalty)) throw ConfigError("train: penalty must be finite and >= 0");
    ModelConfig c = model();
    c.flavor = flavor;
    c.validate();
  }
};

struct TrainReport {
  Flavor flavor = Flavor::free;
  std::uint64_t seed = 0;
  Vec mse;  // per iteration, per-position mean over positions 2..M of that iteration's batch
  double final_mse = 0.0;
  double target_variance = 0.0;
  double wall_seconds = 0.0;
  ModelParams params;
  bool diverged = false;
  std::string message;
};

/// Variance of q(a, b) for independent a, b drawn from dist.
inline double target_variance(const QTrueTable& qt, const CategoryDist& dist) {
  double mean = 0.0, sq = 0.0;
  for (std::size_t a = 0; a < qt.n(); ++a)
    for (std::size_t b = 0; b < qt.n(); ++b) {
      const double w = dist.p[a] * dist.p[b];
      mean += w * qt(a, b);
      sq += w * qt(a, b) * qt(a, b);
    }
  return sq - mean * mean;
}

namespace detail {
inline double penalty_term(const ModelParams& p, const ModelConfig& flavored, double weight, ModelParams* grad) {
  const FlavorMasks f = flavor_masks(flavored);
  double s = 0.0;
  const std::pair<const Mat*, const Mat*> pairs[] = {{&p.q, &f.qk}, {&p.k, &f.qk}, {&p.v, &f.v}};
  Mat* gs[] = {grad ? &grad->q : nullptr, grad ? &grad->k : nullptr, grad ? &grad->v : nullptr};
  for (std::size_t t = 0; t < 3; ++t) {
    const Mat& x = *pairs[t].first;
    const Mat& keep = *pairs[t].second;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (keep.data()[i] == 0.0) {
        s += weight * x.data()[i] * x.data()[i];
        if (gs[t]) gs[t]->data()[i] += 2.0 * weight * x.data()[i];
      }
  }
  return s;
}
}  // namespace detail

inline TrainReport train(const TrainConfig& cfg, const QTrueTable& qt) {
  cfg.validate();
  if (qt.n() != cfg.n) throw ConfigError("train: table size does not match N");
  const auto t0 = std::chrono::steady_clock::now();
  const ModelConfig mc = cfg.model();
  ModelConfig flavored = mc;
  flavored.flavor = cfg.flavor;
  const CategoryDist dist = CategoryDist::uniform(cfg.n);
  const std::size_t threads = cfg.threads == 0 ? worker_count() : cfg.threads;

  const Rng root(cfg.seed);
  Rng init_rng = root.split(1);
  TrainReport rep;
  rep.flavor = cfg.flavor;
  rep.seed = cfg.seed;
  rep.target_variance = target_variance(qt, dist);
  rep.params = init_params(mc, init_rng);

  Vec x = rep.params.flatten();
  ModelParams work = rep.params;
  Batch batch;
  const Objective objective = [&](const Vec& xv, Vec* grad) {
    work.assign(xv);
    LossGrad lg = loss_and_grad(work, mc, batch, grad != nullptr, threads, cfg.chunk);
    if (cfg.penalty > 0.0) lg.loss += detail::penalty_term(work, flavored, cfg.penalty, grad ? &lg.grad : nullptr);
    if (grad) *grad = lg.grad.flatten();
    return lg.loss;
  };

  Lbfgs lbfgs;
  Adam adam;
  try {
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
      const Rng batch_rng = root.split(1000 + (cfg.fixed_batch ? 0 : it));
      batch = make_batch(sample_batch(cfg.n, cfg.m, dist, batch_rng, cfg.batch), qt);
      const double loss = cfg.optimizer == Optimizer::quasi_newton ? lbfgs.minimize(x, objective, cfg.inner)
                                                                   : adam.minimize(x, objective, cfg.inner);
      rep.params.assign(x);
      if (cfg.penalty == 0.0) {
        apply_masks(rep.params, flavored);
        x = rep.params.flatten();
      }
      if (!std::isfinite(loss) || !rep.params.all_finite()) throw NonFiniteError("non-finite loss or parameters");
      rep.mse.push_back(loss);
    }
  } catch (const NonFiniteError& e) {
    rep.diverged = true;
    rep.message = std::string("diverged at iteration ") + std::to_string(rep.mse.size() + 1) + ": " + e.what();
  }
  rep.final_mse = rep.mse.empty() ? std::numeric_limits<double>::quiet_NaN() : rep.mse.back();
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

/// Pearson correlation of two equally long samples. Sets *degenerate and
/// returns 0 when either sample has zero variance.
inline double pearson(std::span<const double> a, std::span<const double> b, bool* degenerate = nullptr) {
  if (a.size() != b.size() || a.size() < 2) throw ShapeError("pearson: need two samples of equal length >= 2");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  const bool deg = !(saa > 0.0) || !(sbb > 0.0);
  if (degenerate) *degenerate = deg;
  return deg ? 0.0 : sab / std::sqrt(saa * sbb);
}

/// Absolute correlation of the category block of k^T q with the table (all N^2 entries).
inline double attention_block_similarity(const ModelParams& p, const QTrueTable& qt, bool* degenerate = nullptr) {
  const std::size_t n = qt.n();
  if (p.q.rows() < n) throw ShapeError("attention_block_similarity: model smaller than table");
  const Mat block = matmul_tn(p.k, p.q).block(0, 0, n, n);
  // the sign of the block is not identifiable: v and the columns of W1 that
  // read the attention rows can absorb it
  return std::abs(pearson(block.data(), qt.table.data(), degenerate));
}

inline void write_loss_curve_csv(const std::string& path, const std::vector<TrainReport>& runs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out.precision(17);
  out << "iteration,flavor,seed,mse\n";
  for (const auto& r : runs)
    for (std::size_t i = 0; i < r.mse.size(); ++i) out << i + 1 << ',' << to_string(r.flavor) << ',' << r.seed << ',' << r.mse[i] << '\n';
}

inline void write_attn_dump_csv(const std::string& path, const std::vector<TrainReport>& runs, std::size_t n) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out.precision(17);
  out << "flavor,seed,block,row,col,value\n";
  for (const auto& r : runs) {
    const Mat ktq = matmul_tn(r.params.k, r.params.q);
    const std::size_t d = ktq.rows(), m = d - n;
    const std::pair<const char*, Mat> blocks[] = {{"ktq-cat", ktq.block(0, 0, n, n)},
                                                  {"ktq-pos", ktq.block(n, n, m, m)},
                                                  {"v-cat", r.params.v.block(0, 0, n, n)},
                                                  {"v-pos", r.params.v.block(n, n, m, m)}};
    for (const auto& [name, b] : blocks)
      for (std::size_t i = 0; i < b.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j)
          out << to_string(r.flavor) << ',' << r.seed << ',' << name << ',' << i + 1 << ',' << j + 1 << ',' << b(i, j)
              << '\n';
  }
}

}  // namespace attnlab
