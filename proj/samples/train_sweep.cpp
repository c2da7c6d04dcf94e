// Trains the four flavors on one table and prints final MSE / Var(Y) and the
// similarity of the learned k^T q category block to the table.
//
//   train_sweep [iterations] [batch] [seed]
#include <cstdio>
#include <cstdlib>

#include "attnlab/train.hpp"

using namespace attnlab;

int main(int argc, char** argv) {
  TrainConfig cfg;
  cfg.iterations = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 10;
  cfg.batch = argc > 2 ? std::strtoul(argv[2], nullptr, 10) : 200;
  cfg.seed = argc > 3 ? std::strtoull(argv[3], nullptr, 10) : 1;
  Rng table_rng = Rng(cfg.seed).split(2);
  const auto qt = sample_qtrue(cfg.n, QMode::standard_normal, table_rng);

  std::printf("%-6s %12s %10s %8s %8s\n", "flavor", "final mse", "mse/var", "r(ktq)", "seconds");
  for (Flavor f : {Flavor::sol1, Flavor::sol2, Flavor::sol3, Flavor::free}) {
    cfg.flavor = f;
    const auto rep = train(cfg, qt);
    bool degenerate = false;
    const double r = attention_block_similarity(rep.params, qt, &degenerate);
    std::printf("%-6s %12.5f %10.4f %8s %8.1f%s\n", to_string(f).c_str(), rep.final_mse,
                rep.final_mse / rep.target_variance, degenerate ? "n/a" : std::to_string(r).substr(0, 6).c_str(),
                rep.wall_seconds, rep.diverged ? "  (diverged)" : "");
  }
}
