// attnlab: verification, gradient checks, stationarity scans and training.
//
// Exit codes: 0 ok, 2 tolerance failure, 3 configuration error, 4 divergence.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "attnlab/attention.hpp"
#include "attnlab/context.hpp"
#include "attnlab/report.hpp"
#include "attnlab/solutions.hpp"
#include "attnlab/stationarity.hpp"
#include "attnlab/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace attnlab;

namespace {

constexpr int kOk = 0, kTolerance = 2, kConfig = 3, kDiverged = 4;
constexpr const char* kVersion = "attnlab 1.0.0";

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// Values from --config fill every option the command line left unset.
// Keys are option names without the leading dashes.
struct ConfigBinding {
  std::map<std::string, std::pair<CLI::Option*, std::function<void(const json&)>>> keys;

  template <class T>
  void bind(CLI::Option* opt, T& target) {
    std::string name = opt->get_name();
    while (!name.empty() && name.front() == '-') name.erase(name.begin());
    keys[name] = {opt, [&target](const json& j) { target = j.get<T>(); }};
  }

  void apply(const std::string& path) const {
    if (path.empty()) return;
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config " + path + ": top level must be an object");
    for (const auto& [k, v] : j.items()) {
      const auto it = keys.find(k);
      if (it == keys.end()) throw ConfigError("config " + path + ": unknown key '" + k + "'");
      if (it->second.first->count() > 0) continue;
      try {
        it->second.second(v);
      } catch (const json::exception& e) {
        throw ConfigError("config " + path + ": bad value for '" + k + "': " + e.what());
      }
    }
  }
};

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

// Written once before any output and again on completion.
struct Manifest {
  json j;
  fs::path path;

  Manifest(std::string sub, json config, std::uint64_t seed, fs::path dir) : path(dir / "manifest.json") {
    j["subcommand"] = std::move(sub);
    j["config"] = std::move(config);
    j["seed"] = seed;
    j["version"] = kVersion;
    j["outputs"] = json::array();
    j["start"] = utc_now();
    j["end"] = nullptr;
  }
  void declare(const fs::path& p) { j["outputs"].push_back(p.string()); }
  void write() const { write_text(path, j.dump(2) + "\n"); }
  void finish() {
    j["end"] = utc_now();
    write();
  }
};

// ----------------------------------------------------------------- verify --

struct VerifyArgs {
  std::size_t n = 10, m = 50, trials = 1000;
  std::uint64_t seed = 7;
  std::string solution = "all", variant = "corrected", qmode = "nonnegative-shifted", tokens, out;
};

int cmd_verify(const VerifyArgs& a) {
  if (a.n < 2 || a.m < 2 || a.trials == 0) throw ConfigError("verify: need n >= 2, m >= 2, trials >= 1");
  const Rng root(a.seed);
  Rng table_rng = root.split(1);
  const QTrueTable qt = sample_qtrue(a.n, parse_qmode(a.qmode), table_rng);
  const CategoryDist dist = CategoryDist::uniform(a.n);
  const BVariant variant = a.variant == "original" ? BVariant::original : BVariant::corrected;
  const bool all = a.solution == "all";
  json report;
  report["n"] = a.n;
  report["m"] = a.m;
  report["qmode"] = a.qmode;
  bool failed = false;

  std::vector<TokenSequence> contexts;
  if (!a.tokens.empty()) {
    std::vector<int> one_based;
    std::stringstream ss(a.tokens);
    for (std::string item; std::getline(ss, item, ',');) one_based.push_back(std::stoi(item));
    if (one_based.size() != a.m) throw ConfigError("verify: --tokens must list exactly m categories");
    contexts.push_back(TokenSequence::from_one_based(one_based, a.n));
  } else {
    contexts = sample_batch(a.n, a.m, dist, root.split(2), a.trials);
  }

  auto check = [&](const PipelineParams& p, const std::string& name, bool may_fail) {
    double worst = 0.0;
    for (const auto& t : contexts) {
      const Vec y = run_pipeline(p, encode_context(t)), target = targets(t, qt);
      for (std::size_t i = 1; i < y.size(); ++i) worst = std::max(worst, std::abs(y[i] - target[i]));
    }
    report["solutions"][name] = worst;
    std::printf("%-16s max |prediction - target| = %.3e\n", name.c_str(), worst);
    if (contexts.size() == 1) {
      const Vec y = run_pipeline(p, encode_context(contexts.front()));
      std::printf("%-16s prediction:", name.c_str());
      for (double v : y) std::printf(" %.12g", v);
      std::printf("\n");
    }
    if (worst > 1e-9 && !may_fail) failed = true;
  };

  if (all || a.solution == "1") {
    const PipelineParams p = build_solution1(qt, a.n, a.m, variant);
    check(p, to_string(p.label), variant == BVariant::original);
    if (variant == BVariant::original) {
      std::fprintf(stderr, "warning: the original-order B leaks on repeated categories\n");
      std::printf("%4s %16s %16s\n", "a", "leak", "2*sum_{b!=a} q");
      for (std::size_t c = 0; c < a.n; ++c) {
        const double leak = fully_connected(p, pair_column(a.n, a.m, c, c)) - qt(c, c);
        std::printf("%4zu %16.9g %16.9g\n", c + 1, leak, original_b_leak(qt, c));
        report["leak"].push_back({{"a", c + 1}, {"leak", leak}, {"closed_form", original_b_leak(qt, c)}});
      }
    }
  }
  const bool bounded = qt.mode != QMode::pair_code || qt.table.max_abs() < 100.0;
  if ((all || a.solution == "2") && bounded) check(build_solution2(qt, a.n, a.m), "sol2", false);
  if ((all || a.solution == "3") && bounded) check(build_solution3(qt, a.n, a.m), "sol3", false);
  if ((all || a.solution == "2" || a.solution == "3") && bounded) {
    const QTrueTable shifted = qt.mode == QMode::standard_normal ? shift_to_nonnegative(qt.table) : qt;
    double worst = 0.0;
    for (const auto& t : contexts) {
      const EncodedContext e = encode_context(t);
      worst = std::max(worst, check_equivalence_2_3(shifted, e.categories()).max_abs_diff);
    }
    report["equivalence_max_diff"] = worst;
    std::printf("%-16s max diff = %.3e\n", "equivalence", worst);
    if (worst > 1e-9) failed = true;
  }
  report["pass"] = !failed;
  if (!a.out.empty()) {
    const fs::path out(a.out);
    Manifest man("verify", {{"n", a.n}, {"m", a.m}, {"trials", a.trials}, {"solution", a.solution},
                            {"variant", a.variant}, {"qmode", a.qmode}, {"tokens", a.tokens}},
                 a.seed, out.parent_path());
    man.declare(out);
    write_text(out, report.dump(2) + "\n");
    man.finish();
  }
  return failed ? kTolerance : kOk;
}

// -------------------------------------------------------------- gradcheck --

struct GradcheckArgs {
  std::string which = "A", oracle = "enum", out;
  std::size_t n = 3, m = 4, points = 20, samples = 1000000, coords = 200, batch = 4;
  std::uint64_t seed = 1;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const Rng root(a.seed);
  ResidualReport rep{"gradcheck case " + a.which + " oracle " + a.oracle, {}};
  if (a.which == "model") {
    if (a.oracle != "fd") throw ConfigError("gradcheck: the model case supports --oracle fd only");
    ModelConfig c;
    c.n = a.n;
    c.m = a.m;
    c.hidden = 2 * a.n * a.n - a.n;
    for (std::size_t k = 0; k < a.points; ++k) {
      Rng init = root.split(3 * k), table = root.split(3 * k + 1), pick = root.split(3 * k + 2);
      const ModelParams p = init_params(c, init);
      const QTrueTable qt = sample_qtrue(a.n, QMode::standard_normal, table);
      const Batch b = make_batch(sample_batch(a.n, a.m, CategoryDist::uniform(a.n), root.split(1000 + k), a.batch), qt);
      const ModelGradcheck g = gradcheck_model(p, c, b, a.coords, 1e-5, pick);
      rep.add("init" + std::to_string(k + 1) + "_max_rel", g.max_rel, 1e-5, false,
              "worst " + g.worst + ", kinks redrawn " + std::to_string(g.kinks_skipped));
    }
  } else if (a.which == "A" || a.which == "B") {
    if (a.oracle != "enum" && a.oracle != "mc" && a.oracle != "fd") throw ConfigError("gradcheck: unknown oracle " + a.oracle);
    const CategoryDist dist = CategoryDist::uniform(a.n);
    for (std::size_t k = 0; k < a.points; ++k) {
      Rng prng = root.split(k);
      Mat closed, oracle, se;
      if (a.which == "A") {
        const CaseAParams p{prng.normal_matrix(a.m, a.m, 1.0), prng.normal_matrix(a.n, a.n, 1.0)};
        closed = grad_q_closed(p) * -2.0;
        const Mat cv = grad_v_closed(p) * -2.0;
        GradPair g = a.oracle == "enum" ? enumerate_caseA(p)
                     : a.oracle == "mc" ? monte_carlo_caseA(p, a.samples, root.split(10000 + k))
                                        : finite_diff_caseA(p, 1e-5);
        closed = Mat(1, closed.size() + cv.size(), [&] {
          Vec v(closed.values());
          v.insert(v.end(), cv.values().begin(), cv.values().end());
          return v;
        }());
        Vec o(g.g1.values());
        o.insert(o.end(), g.g2.values().begin(), g.g2.values().end());
        oracle = Mat(1, o.size(), o);
        if (a.oracle == "mc") {
          Vec s(g.se1.values());
          s.insert(s.end(), g.se2.values().begin(), g.se2.values().end());
          se = Mat(1, s.size(), s);
        }
      } else {
        const QTrueTable qt = sample_qtrue(a.n, QMode::standard_normal, prng);
        const CaseBParams p{prng.normal_matrix(a.m, a.m, 1.0), prng.normal_matrix(a.n, a.n, 1.0)};
        closed = grad_v_caseB_closed(p, qt, dist) * -2.0;
        GradPair g = a.oracle == "enum" ? enumerate_caseB(p, qt, dist)
                     : a.oracle == "mc" ? monte_carlo_caseB(p, qt, dist, a.samples, root.split(10000 + k))
                                        : finite_diff_caseB(p, qt, dist, 1e-5);
        // only the causal part of v enters the loss
        for (std::size_t i = 0; i < a.m; ++i)
          for (std::size_t j = i + 1; j < a.m; ++j) g.g1(i, j) = 0.0;
        oracle = g.g1;
        se = g.se1;
      }
      double worst = 0.0;
      for (std::size_t i = 0; i < closed.size(); ++i) {
        const double d = std::abs(closed.data()[i] - oracle.data()[i]);
        if (a.oracle == "mc")
          worst = std::max(worst, se.data()[i] > 0.0 ? d / se.data()[i] : (d > 1e-12 ? 1e300 : 0.0));
        else
          worst = std::max(worst, d / (a.oracle == "fd" ? std::max(1.0, std::abs(closed.data()[i])) : 1.0));
      }
      const double tol = a.oracle == "enum" ? 1e-9 : a.oracle == "mc" ? 4.0 : 1e-6;
      const char* unit = a.oracle == "enum" ? "max abs diff" : a.oracle == "mc" ? "max diff in standard errors"
                                                                                 : "max diff relative to max(1, |g|)";
      rep.add("point" + std::to_string(k + 1), worst, tol, false, unit);
    }
  } else {
    throw ConfigError("gradcheck: --case must be A, B or model");
  }
  const std::string text = to_json(rep).dump(2);
  std::printf("%s\n", text.c_str());
  if (!a.out.empty()) write_text(a.out, text + "\n");
  return rep.all_pass() ? kOk : kTolerance;
}

// ------------------------------------------------------------- stationary --

struct StationaryArgs {
  std::string regime = "A", family = "canonical", dist = "uniform", out;
  std::size_t n = 4, m = 6, seeds = 50;
  std::uint64_t seed = 1;
};

int cmd_stationary(const StationaryArgs& a) {
  const Rng root(a.seed);
  const CategoryDist dist = a.dist == "linear" ? CategoryDist::linear(a.n) : CategoryDist::uniform(a.n);
  ResidualReport rep{"stationary regime " + a.regime + " family " + a.family, {}};
  json extra = json::object();
  if (a.regime == "A") {
    if (a.family != "canonical" && a.family != "flat")
      throw ConfigError("stationary: regime A supports families canonical and flat");
    rep.append(stationary_residuals_caseA(a.family == "canonical" ? canonical_caseA(a.n, a.m) : flat_caseA(a.n, a.m)));
  } else if (a.regime == "A-softmax") {
    if (a.family != "canonical") throw ConfigError("stationary: regime A-softmax supports family canonical only");
    rep.append(softmax_constrained_residual(canonical_caseA(a.n, a.m)), "canonical_");
    std::size_t close = 0;
    double worst = 0.0;
    for (std::size_t s = 0; s < a.seeds; ++s) {
      Rng r = root.split(s);
      const DescentResult d = projected_descent_caseA(random_simplex_point(a.n, a.m, r));
      extra["distances"].push_back(d.distance);
      worst = std::max(worst, d.distance);
      if (d.distance <= 1e-3) ++close;
    }
    rep.add("descent_max_distance", worst, 1e-3, false,
            std::to_string(close) + "/" + std::to_string(a.seeds) + " runs within 1e-3 of (I, shift)");
  } else if (a.regime == "B") {
    if (a.family == "canonical" || a.family == "gauge") {
      Rng r = root.split(0);
      const QTrueTable qt = sample_qtrue(a.n, QMode::standard_normal, r);
      if (a.family == "canonical") {
        rep.append(stationarity_caseB(canonical_caseB(qt, a.m), qt, dist));
      } else {
        for (double c : {0.5, 2.0, -0.3})
          rep.append(stationarity_caseB(gauge_caseB(qt, a.m, c), qt, dist), "c=" + std::to_string(c).substr(0, 4) + "_");
      }
    } else if (a.family == "invalid") {
      std::size_t positive = 0;
      double smallest = std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < a.seeds; ++s) {
        Rng r = root.split(s);
        const double w = caseB_invalid_branch_witness(sample_qtrue(a.n, QMode::standard_normal, r), dist);
        smallest = std::min(smallest, w);
        if (w > 1e-6) ++positive;
      }
      extra["witness_positive"] = std::to_string(positive) + "/" + std::to_string(a.seeds);
      rep.add("witness_min_shortfall", std::max(0.0, 1e-6 - smallest), 0.0, false,
              std::to_string(positive) + "/" + std::to_string(a.seeds) + " tables with witness > 1e-6");
      // the point of the branch at the last row is not stationary: v_prev = kappa (1 - kappa) W
      Rng r = root.split(0);
      const QTrueTable qt = sample_qtrue(a.n, QMode::standard_normal, r);
      const std::size_t row = a.m - 1;
      const double kappa = invalid_branch_kappa(row), w = caseB_invalid_branch_witness(qt, dist);
      const ResidualReport b = stationarity_caseB_row(invalid_branch_caseB(qt, dist, a.m, row), qt, dist, row);
      rep.add("branch_v_prev_minus_kappa_term", b.value("v_prev") - kappa * (1.0 - kappa) * w, 1e-10, false,
              "v_prev at the branch point equals kappa (1 - kappa) W");
      extra["branch_point"] = to_json(b);
    } else {
      throw ConfigError("stationary: regime B supports families canonical, gauge and invalid");
    }
  } else {
    throw ConfigError("stationary: --regime must be A, A-softmax or B");
  }
  json j = to_json(rep);
  for (const auto& [k, v] : extra.items()) j[k] = v;
  const std::string text = j.dump(2);
  std::printf("%s\n", text.c_str());
  if (!a.out.empty()) write_text(a.out, text + "\n");
  return rep.all_pass() ? kOk : kTolerance;
}

// ------------------------------------------------------------------ train --

struct TrainArgs {
  TrainConfig cfg;
  std::string flavor = "free", optimizer = "quasi-newton", out_dir = "run";
  double expect_ratio = 0.0;
};

int cmd_train(TrainArgs a, const json& resolved) {
  a.cfg.flavor = parse_flavor(a.flavor);
  a.cfg.optimizer = parse_optimizer(a.optimizer);
  a.cfg.validate();
  const fs::path dir = a.out_dir;
  fs::create_directories(dir);
  Manifest man("train", resolved, a.cfg.seed, dir);
  const fs::path curve = dir / "loss_curve.csv", dump = dir / "attn_dump.csv", summary = dir / "summary.json";
  man.declare(curve);
  man.declare(dump);
  man.declare(summary);
  man.write();

  Rng table_rng = Rng(a.cfg.seed).split(2);
  const QTrueTable qt = sample_qtrue(a.cfg.n, QMode::standard_normal, table_rng);
  const TrainReport rep = train(a.cfg, qt);
  write_loss_curve_csv(curve.string(), {rep});
  write_attn_dump_csv(dump.string(), {rep}, a.cfg.n);
  bool degenerate = false;
  const double r = attention_block_similarity(rep.params, qt, &degenerate);
  json s;
  s["flavor"] = a.flavor;
  s["seed"] = a.cfg.seed;
  s["final_mse"] = rep.final_mse;
  s["target_variance"] = rep.target_variance;
  s["mse_over_variance"] = rep.final_mse / rep.target_variance;
  s["ktq_category_similarity"] = r;
  s["similarity_degenerate"] = degenerate;
  s["diverged"] = rep.diverged;
  if (!rep.message.empty()) s["message"] = rep.message;
  write_text(summary, s.dump(2) + "\n");
  man.finish();

  std::printf("flavor %s seed %llu final MSE %.6g (Var(Y) %.6g, ratio %.4g), k^T q similarity r = %.4f, %.1f s\n",
              a.flavor.c_str(), static_cast<unsigned long long>(a.cfg.seed), rep.final_mse, rep.target_variance,
              rep.final_mse / rep.target_variance, r, rep.wall_seconds);
  if (rep.diverged) {
    std::fprintf(stderr, "%s\n", rep.message.c_str());
    return kDiverged;
  }
  if (a.expect_ratio > 0.0 && !(rep.final_mse < a.expect_ratio * rep.target_variance)) return kTolerance;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attnlab: one-level attention experiments"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  std::string config;

  VerifyArgs va;
  ConfigBinding vb;
  auto* verify = app.add_subcommand("verify", "check the handcrafted solutions and the equivalence identity");
  verify->add_option("--config", config, "JSON file with option values (flags win)");
  vb.bind(verify->add_option("--n", va.n, "number of categories"), va.n);
  vb.bind(verify->add_option("--m", va.m, "context length"), va.m);
  vb.bind(verify->add_option("--seed", va.seed), va.seed);
  vb.bind(verify->add_option("--solution", va.solution)->check(CLI::IsMember({"1", "2", "3", "all"})), va.solution);
  vb.bind(verify->add_option("--variant", va.variant)->check(CLI::IsMember({"original", "corrected"})), va.variant);
  vb.bind(verify->add_option("--trials", va.trials, "random contexts"), va.trials);
  vb.bind(verify->add_option("--qmode", va.qmode)->check(CLI::IsMember({"standard-normal", "nonnegative-shifted", "pair-code"})),
          va.qmode);
  vb.bind(verify->add_option("--tokens", va.tokens, "one context as comma-separated 1-based categories"), va.tokens);
  vb.bind(verify->add_option("--out", va.out, "JSON report path"), va.out);

  GradcheckArgs ga;
  ConfigBinding gb;
  auto* grad = app.add_subcommand("gradcheck", "compare closed-form or tape gradients with an oracle");
  grad->add_option("--config", config, "JSON file with option values (flags win)");
  gb.bind(grad->add_option("--case", ga.which)->check(CLI::IsMember({"A", "B", "model"})), ga.which);
  gb.bind(grad->add_option("--oracle", ga.oracle)->check(CLI::IsMember({"enum", "mc", "fd"})), ga.oracle);
  gb.bind(grad->add_option("--n", ga.n), ga.n);
  gb.bind(grad->add_option("--m", ga.m), ga.m);
  gb.bind(grad->add_option("--points", ga.points, "random parameter points (model: random inits)"), ga.points);
  gb.bind(grad->add_option("--samples", ga.samples, "Monte-Carlo sample count"), ga.samples);
  gb.bind(grad->add_option("--coords", ga.coords, "model: coordinates per init"), ga.coords);
  gb.bind(grad->add_option("--batch", ga.batch, "model: contexts in the probe batch"), ga.batch);
  gb.bind(grad->add_option("--seed", ga.seed), ga.seed);
  gb.bind(grad->add_option("--out", ga.out, "JSON report path"), ga.out);

  StationaryArgs sa;
  ConfigBinding sb;
  auto* stat = app.add_subcommand("stationary", "residuals of the stationary families");
  stat->add_option("--config", config, "JSON file with option values (flags win)");
  sb.bind(stat->add_option("--regime", sa.regime)->check(CLI::IsMember({"A", "A-softmax", "B"})), sa.regime);
  sb.bind(stat->add_option("--family", sa.family)->check(CLI::IsMember({"canonical", "flat", "gauge", "invalid"})), sa.family);
  sb.bind(stat->add_option("--dist", sa.dist)->check(CLI::IsMember({"uniform", "linear"})), sa.dist);
  sb.bind(stat->add_option("--n", sa.n), sa.n);
  sb.bind(stat->add_option("--m", sa.m), sa.m);
  sb.bind(stat->add_option("--seeds", sa.seeds, "random starts or random tables"), sa.seeds);
  sb.bind(stat->add_option("--seed", sa.seed), sa.seed);
  sb.bind(stat->add_option("--out", sa.out, "JSON report path"), sa.out);

  TrainArgs ta;
  ConfigBinding tb;
  auto* tr = app.add_subcommand("train", "train one flavor and write loss_curve.csv, attn_dump.csv, manifest.json");
  tr->add_option("--config", config, "JSON file with option values (flags win)");
  tb.bind(tr->add_option("--flavor", ta.flavor)->check(CLI::IsMember({"sol1", "sol2", "sol3", "free"})), ta.flavor);
  tb.bind(tr->add_option("--iters", ta.cfg.iterations), ta.cfg.iterations);
  tb.bind(tr->add_option("--inner", ta.cfg.inner, "optimizer steps per iteration"), ta.cfg.inner);
  tb.bind(tr->add_option("--batch", ta.cfg.batch), ta.cfg.batch);
  tb.bind(tr->add_option("--n", ta.cfg.n), ta.cfg.n);
  tb.bind(tr->add_option("--m", ta.cfg.m), ta.cfg.m);
  tb.bind(tr->add_option("--hidden", ta.cfg.hidden), ta.cfg.hidden);
  tb.bind(tr->add_option("--seed", ta.cfg.seed), ta.cfg.seed);
  tb.bind(tr->add_option("--optimizer", ta.optimizer)->check(CLI::IsMember({"quasi-newton", "adaptive-gd"})), ta.optimizer);
  tb.bind(tr->add_flag("--softmax", ta.cfg.softmax, "softmax inside attention"), ta.cfg.softmax);
  tb.bind(tr->add_option("--penalty", ta.cfg.penalty, "soft constraint weight instead of hard masks"), ta.cfg.penalty);
  tb.bind(tr->add_flag("--fixed-batch", ta.cfg.fixed_batch, "reuse one batch for every iteration"), ta.cfg.fixed_batch);
  tb.bind(tr->add_option("--out-dir", ta.out_dir), ta.out_dir);
  tb.bind(tr->add_option("--expect-ratio", ta.expect_ratio, "exit 2 unless final MSE < ratio * Var(Y)"), ta.expect_ratio);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (verify->parsed()) {
      vb.apply(config);
      return cmd_verify(va);
    }
    if (grad->parsed()) {
      gb.apply(config);
      return cmd_gradcheck(ga);
    }
    if (stat->parsed()) {
      sb.apply(config);
      return cmd_stationary(sa);
    }
    if (tr->parsed()) {
      tb.apply(config);
      if (ta.cfg.threads == 0) ta.cfg.threads = worker_count();
      json resolved;
      resolved["flavor"] = ta.flavor;
      resolved["iters"] = ta.cfg.iterations;
      resolved["inner"] = ta.cfg.inner;
      resolved["batch"] = ta.cfg.batch;
      resolved["n"] = ta.cfg.n;
      resolved["m"] = ta.cfg.m;
      resolved["hidden"] = ta.cfg.hidden;
      resolved["optimizer"] = ta.optimizer;
      resolved["softmax"] = ta.cfg.softmax;
      resolved["penalty"] = ta.cfg.penalty;
      resolved["fixed-batch"] = ta.cfg.fixed_batch;
      return cmd_train(ta, resolved);
    }
  } catch (const EnumerationCapError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kConfig;
  } catch (const NonFiniteError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDiverged;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kConfig;
}
