// Walks the four-token example through the solution-1 pipeline and prints
// every intermediate matrix.
#include <cstdio>

#include "attnlab/solutions.hpp"

using namespace attnlab;

static void print(const char* title, const Mat& m) {
  std::printf("%s (%zux%zu)\n", title, m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) std::printf(" %6.2f", m(r, c));
    std::printf("\n");
  }
  std::printf("\n");
}

int main() {
  const std::size_t n = 4, m = 4;
  const auto qt = pair_code_table(n);
  const auto tokens = TokenSequence::from_one_based({1, 3, 2, 2}, n);
  const auto e = encode_context(tokens);
  const auto p = build_solution1(qt, n, m, BVariant::corrected);
  const auto tr = trace_pipeline(p, e);

  print("X", e.X);
  print("attention weights", tr.attn.weights);
  print("attention + X", tr.skip);
  print("ReLU output", tr.hidden);
  std::printf("prediction:");
  for (double y : tr.y) std::printf(" %g", y);
  std::printf("\ntarget:    ");
  for (double y : targets(tokens, qt)) std::printf(" %g", y);
  std::printf("\n");
}
