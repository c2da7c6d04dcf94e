#include <gtest/gtest.h>

#include <cmath>

#include "attnlab/model.hpp"
#include "attnlab/solutions.hpp"

using namespace attnlab;

namespace {

ModelConfig small_config(Flavor f, std::size_t hidden = 24) {
  ModelConfig c;
  c.n = 3;
  c.m = 6;
  c.hidden = hidden;
  c.flavor = f;
  return c;
}

// Dense forward pass of one context from the plain linalg primitives.
Vec dense_predict(const ModelParams& p, const ModelConfig& c, const TokenSequence& t) {
  const auto e = encode_context(t);
  const FlavorMasks fm = flavor_masks(c);
  BlockParams bp;
  bp.q = p.q.hadamard(fm.qk);
  bp.k = p.k.hadamard(fm.qk);
  bp.v = p.v.hadamard(fm.v);
  bp.softmax = c.softmax;
  bp.scale = std::sqrt(static_cast<double>(c.d()));
  Mat h = apply_skip(attention(e, bp), e, 1.0);
  if (c.norm == NormMode::layer_norm)
    for (std::size_t i = 0; i < h.cols(); ++i) {
      Vec col(h.rows());
      for (std::size_t r = 0; r < h.rows(); ++r) col[r] = h(r, i);
      const Vec out = layer_norm(col, c.ln_eps, p.gain.data(), p.shift.data());
      for (std::size_t r = 0; r < h.rows(); ++r) h(r, i) = out[r];
    }
  const Mat z = relu_bias(matmul(p.W1, h), p.b1.data());
  Vec y = matmul(p.W2, z).row_vec(0);
  for (double& v : y) v += p.b2(0, 0);
  return y;
}

Batch random_batch(const ModelConfig& c, std::size_t size, std::uint64_t seed, QTrueTable* table = nullptr) {
  Rng rng(seed);
  const auto qt = sample_qtrue(c.n, QMode::standard_normal, rng);
  if (table) *table = qt;
  return make_batch(sample_batch(c.n, c.m, CategoryDist::uniform(c.n), rng.split(1), size), qt);
}

}  // namespace

TEST(Model, ForwardMatchesDenseReference) {
  for (Flavor f : {Flavor::free, Flavor::sol1, Flavor::sol2, Flavor::sol3})
    for (bool softmax : {false, true}) {
      auto c = small_config(f);
      c.softmax = softmax;
      Rng rng(1);
      auto p = init_params(c, rng);
      p.gain = rng.normal_matrix(c.d(), 1, 1.0);
      p.shift = rng.normal_matrix(c.d(), 1, 1.0);
      p.b1 = rng.normal_matrix(c.hidden, 1, 0.3);
      Rng tr(2);
      const auto t = sample_context(c.n, c.m, CategoryDist::uniform(c.n), tr);
      EXPECT_LT(max_abs_diff(predict(p, c, t), dense_predict(p, c, t)), 1e-12) << to_string(f) << softmax;
    }
}

TEST(Model, MasksZeroForbiddenEntries) {
  const auto c = small_config(Flavor::sol1);
  Rng rng(3);
  const auto p = init_params(c, rng);
  for (std::size_t r = 0; r < c.d(); ++r) {
    for (std::size_t col = 0; col < c.n; ++col) EXPECT_EQ(p.q(r, col), 0.0);
    for (std::size_t col = 0; col < c.d(); ++col)
      if (r != col || r >= c.n) {
        EXPECT_EQ(p.v(r, col), 0.0);
      }
  }
}

TEST(Model, ForbiddenEntriesDoNotMatter) {
  const auto c = small_config(Flavor::sol2);
  Rng rng(4);
  auto p = init_params(c, rng);
  const auto batch = random_batch(c, 5, 5);
  const double base = loss_and_grad(p, c, batch, false).loss;
  p.q(0, c.n + 1) = 3.0;
  p.v(0, 0) = -2.0;
  EXPECT_EQ(loss_and_grad(p, c, batch, false).loss, base);
  const auto g = loss_and_grad(p, c, batch).grad;
  EXPECT_EQ(g.q(0, c.n + 1), 0.0);
  EXPECT_EQ(g.v(0, 0), 0.0);
}

TEST(Model, GradientMatchesFiniteDifferences) {
  for (Flavor f : {Flavor::free, Flavor::sol1, Flavor::sol2, Flavor::sol3}) {
    const auto c = small_config(f);
    Rng rng(6);
    const auto p = init_params(c, rng);
    const auto batch = random_batch(c, 4, 7);
    Rng probe(8);
    const auto r = gradcheck_model(p, c, batch, 40, 1e-5, probe);
    EXPECT_LT(r.max_rel, 1e-5) << to_string(f) << " worst " << r.worst;
    EXPECT_EQ(r.checked, 40u);
  }
}

TEST(Model, ThreadAndChunkInvariance) {
  const auto c = small_config(Flavor::free);
  Rng rng(9);
  const auto p = init_params(c, rng);
  const auto batch = random_batch(c, 23, 10);
  const auto one = loss_and_grad(p, c, batch, true, 1, 4);
  const auto three = loss_and_grad(p, c, batch, true, 3, 4);
  EXPECT_EQ(one.loss, three.loss);
  EXPECT_EQ(one.grad.flatten(), three.grad.flatten());
  const auto big = loss_and_grad(p, c, batch, true, 1, 23);
  EXPECT_NEAR(big.loss, one.loss, 1e-12);
  EXPECT_LT(max_abs_diff(big.grad.flatten(), one.grad.flatten()), 1e-12);
}

TEST(Model, LossIsMeanOverPositionsTwoToM) {
  const auto c = small_config(Flavor::free);
  Rng rng(11);
  auto p = init_params(c, rng);
  QTrueTable qt;
  const auto batch = random_batch(c, 3, 12, &qt);
  const Rng ctx_rng = Rng(12).split(1);
  const auto contexts = sample_batch(c.n, c.m, CategoryDist::uniform(c.n), ctx_rng, 3);
  double sse = 0.0;
  for (const auto& t : contexts) {
    const Vec y = dense_predict(p, c, t), target = targets(t, qt);
    for (std::size_t i = 1; i < c.m; ++i) sse += (y[i] - target[i]) * (y[i] - target[i]);
  }
  EXPECT_NEAR(loss_and_grad(p, c, batch, false).loss, sse / (3.0 * (c.m - 1)), 1e-12);
}

TEST(Model, PredictionsIgnoreTokensBeyondTheCausalHorizon) {
  const auto c = small_config(Flavor::sol2);
  Rng rng(20);
  const auto p = init_params(c, rng);
  auto t = TokenSequence::from_one_based({1, 3, 2, 2, 1, 3}, c.n);
  const Vec base = predict(p, c, t);
  t.cat[4] = 2;
  t.cat[5] = 0;
  const Vec changed = predict(p, c, t);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(changed[i], base[i]);
  EXPECT_NE(changed[4], base[4]);
}

TEST(Model, ZeroOutputLayerGivesConstant) {
  const auto c = small_config(Flavor::sol3);
  Rng rng(13);
  auto p = init_params(c, rng);
  p.W2 = Mat(1, c.hidden);
  p.b2 = Mat(1, 1, 0.75);
  Rng tr(14);
  for (double y : predict(p, c, sample_context(c.n, c.m, CategoryDist::uniform(c.n), tr))) EXPECT_EQ(y, 0.75);
}

TEST(Model, OutputGradientIsLinearInTargets) {
  const auto c = small_config(Flavor::free);
  Rng rng(15);
  auto p = init_params(c, rng);
  p.W2 = Mat(1, c.hidden);
  auto batch = random_batch(c, 6, 16);
  const Mat g1 = loss_and_grad(p, c, batch).grad.W2;
  for (double& y : batch.target) y *= 2.0;
  const Mat g2 = loss_and_grad(p, c, batch).grad.W2;
  EXPECT_LT(max_abs_diff(g2, g1 * 2.0), 1e-12);
}

TEST(Model, FlattenAssignRoundTrip) {
  const auto c = small_config(Flavor::free);
  Rng rng(17);
  const auto p = init_params(c, rng);
  auto q = p.zeros_like();
  q.assign(p.flatten());
  EXPECT_EQ(q.flatten(), p.flatten());
  EXPECT_EQ(p.size(), 3 * 81u + 2 * 9u + 24 * 9u + 24u + 24u + 1u);
  EXPECT_THROW(q.assign(Vec(3)), ShapeError);
}

TEST(Model, ConfigValidation) {
  EXPECT_THROW(small_config(Flavor::sol1, 14).validate(), ConfigError);
  EXPECT_NO_THROW(small_config(Flavor::sol1, 15).validate());
  EXPECT_THROW(small_config(Flavor::sol2, 8).validate(), ConfigError);
  EXPECT_NO_THROW(small_config(Flavor::sol3, 9).validate());
  EXPECT_EQ(parse_flavor("sol2"), Flavor::sol2);
  EXPECT_THROW(parse_flavor("sol4"), ConfigError);
}

class Planted : public ::testing::TestWithParam<Flavor> {};

TEST_P(Planted, HandcraftedSolutionReproducesTargets) {
  const Flavor f = GetParam();
  ModelConfig c;
  c.n = 4;
  c.m = 8;
  c.hidden = 2 * c.n * c.n;
  c.flavor = f;
  c.norm = NormMode::bypass;
  Rng rng(18);
  const auto qt = sample_qtrue(c.n, QMode::nonnegative_shifted, rng);
  const PipelineParams s = f == Flavor::sol1   ? build_solution1(qt, c.n, c.m, BVariant::corrected)
                           : f == Flavor::sol2 ? build_solution2(qt, c.n, c.m)
                                               : build_solution3(qt, c.n, c.m);
  const auto p = plant_solution(s, c);
  const auto contexts = sample_batch(c.n, c.m, CategoryDist::uniform(c.n), Rng(19), 30);
  for (const auto& t : contexts) {
    const Vec y = predict(p, c, t), target = targets(t, qt);
    for (std::size_t i = 1; i < c.m; ++i) EXPECT_NEAR(y[i], target[i], 1e-9);
  }
  const auto lg = loss_and_grad(p, c, make_batch(contexts, qt));
  EXPECT_LT(lg.loss, 1e-18);
  double gmax = 0.0;
  for (double g : lg.grad.flatten()) gmax = std::max(gmax, std::abs(g));
  EXPECT_LT(gmax, 1e-8);
}

INSTANTIATE_TEST_SUITE_P(Flavors, Planted, ::testing::Values(Flavor::sol1, Flavor::sol2, Flavor::sol3),
                         [](const auto& info) { return to_string(info.param); });

TEST(Model, WorkerCountFromEnvironment) {
  setenv("ATTNLAB_THREADS", "3", 1);
  EXPECT_EQ(worker_count(), 3u);
  setenv("ATTNLAB_THREADS", "zero", 1);
  EXPECT_THROW(worker_count(), ConfigError);
  unsetenv("ATTNLAB_THREADS");
  EXPECT_GE(worker_count(), 1u);
}
