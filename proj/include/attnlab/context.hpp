#pragma once

// Token sequences, their one-hot encoding X = (X_C ; X_P), target tables and
// target vectors.
//
// Categories are 1-based at the API boundary (from_one_based / one_based) and
// 0-based everywhere else. Positions are always 0-based in code.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "attnlab/linalg.hpp"

namespace attnlab {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct CategoryDist {
  Vec p;

  static CategoryDist uniform(std::size_t n) { return {Vec(n, 1.0 / static_cast<double>(n))}; }

  // p_k proportional to k (1-based), the standard skewed test distribution
  static CategoryDist linear(std::size_t n) {
    Vec p(n);
    const double z = static_cast<double>(n * (n + 1)) / 2.0;
    for (std::size_t k = 0; k < n; ++k) p[k] = static_cast<double>(k + 1) / z;
    return {p};
  }

  static CategoryDist point_mass(std::size_t n, std::size_t category) {
    Vec p(n, 0.0);
    p.at(category) = 1.0;
    return {p};
  }

  std::size_t size() const { return p.size(); }

  void validate() const {
    if (p.size() < 2) throw ConfigError("CategoryDist: need at least 2 categories");
    double s = 0.0;
    for (double x : p) {
      if (!(x >= 0.0) || !std::isfinite(x)) throw ConfigError("CategoryDist: negative or non-finite entry");
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-12) throw ConfigError("CategoryDist: probabilities sum to " + std::to_string(s));
  }
};

struct TokenSequence {
  std::vector<int> cat;  // 0-based category per position
  std::size_t n = 0;     // number of categories

  std::size_t size() const { return cat.size(); }

  static TokenSequence from_one_based(const std::vector<int>& ids, std::size_t n) {
    TokenSequence t;
    t.n = n;
    t.cat.reserve(ids.size());
    for (int id : ids) {
      if (id < 1 || id > static_cast<int>(n))
        throw ConfigError("token " + std::to_string(id) + " outside 1.." + std::to_string(n));
      t.cat.push_back(id - 1);
    }
    return t;
  }

  std::vector<int> one_based() const {
    std::vector<int> ids(cat.size());
    std::transform(cat.begin(), cat.end(), ids.begin(), [](int c) { return c + 1; });
    return ids;
  }
};

inline TokenSequence sample_context(std::size_t n, std::size_t m, const CategoryDist& dist, Rng& rng) {
  if (n < 2 || m < 2) throw ConfigError("sample_context: need N >= 2 and M >= 2");
  if (dist.size() != n) throw ConfigError("sample_context: distribution has wrong length");
  dist.validate();
  TokenSequence t;
  t.n = n;
  t.cat.resize(m);
  for (auto& c : t.cat) c = static_cast<int>(rng.categorical(dist.p));
  return t;
}

/// Context b of a batch is drawn from rng.split(b), so batches can be
/// generated in any order or in parallel with identical results.
inline std::vector<TokenSequence> sample_batch(std::size_t n, std::size_t m, const CategoryDist& dist,
                                               const Rng& rng, std::size_t count) {
  std::vector<TokenSequence> out;
  out.reserve(count);
  for (std::size_t b = 0; b < count; ++b) {
    Rng sub = rng.split(b);
    out.push_back(sample_context(n, m, dist, sub));
  }
  return out;
}

struct EncodedContext {
  Mat X;  // (N+M) x M
  std::size_t n = 0;
  std::size_t m = 0;

  Mat categories() const { return X.block(0, 0, n, m); }
  Mat positions() const { return X.block(n, 0, m, m); }
};

inline EncodedContext encode_context(const TokenSequence& t) {
  const std::size_t n = t.n, m = t.size();
  EncodedContext e{Mat(n + m, m), n, m};
  for (std::size_t i = 0; i < m; ++i) {
    if (t.cat[i] < 0 || t.cat[i] >= static_cast<int>(n)) throw ConfigError("encode_context: category out of range");
    e.X(static_cast<std::size_t>(t.cat[i]), i) = 1.0;
    e.X(n + i, i) = 1.0;
  }
  return e;
}

/// Reads back the argmax of every category column.
inline TokenSequence decode_context(const EncodedContext& e) {
  TokenSequence t;
  t.n = e.n;
  t.cat.resize(e.m);
  for (std::size_t i = 0; i < e.m; ++i) {
    std::size_t best = 0;
    for (std::size_t r = 1; r < e.n; ++r)
      if (e.X(r, i) > e.X(best, i)) best = r;
    t.cat[i] = static_cast<int>(best);
  }
  return t;
}

enum class QMode { standard_normal, nonnegative_shifted, pair_code };

inline std::string to_string(QMode m) {
  switch (m) {
    case QMode::standard_normal: return "standard-normal";
    case QMode::nonnegative_shifted: return "nonnegative-shifted";
    case QMode::pair_code: return "pair-code";
  }
  return "?";
}

inline QMode parse_qmode(const std::string& s) {
  if (s == "standard-normal") return QMode::standard_normal;
  if (s == "nonnegative-shifted") return QMode::nonnegative_shifted;
  if (s == "pair-code") return QMode::pair_code;
  throw ConfigError("unknown q-table mode '" + s + "'");
}

inline constexpr double kDefaultScaleCap = 50.0;

/// table(a, b) is the value assigned to the adjacent pair (previous a, current b).
/// For nonnegative-shifted tables, table = (raw - offset) * gain maps a raw
/// standard-normal draw into [0, scale_cap).
struct QTrueTable {
  Mat table;
  QMode mode = QMode::standard_normal;
  double scale_cap = kDefaultScaleCap;
  double offset = 0.0;
  double gain = 1.0;

  std::size_t n() const { return table.rows(); }
  double operator()(std::size_t a, std::size_t b) const { return table(a, b); }
};

inline QTrueTable pair_code_table(std::size_t n) {
  QTrueTable q{Mat(n, n), QMode::pair_code};
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) q.table(a, b) = 10.0 * static_cast<double>(a + 1) + static_cast<double>(b + 1);
  return q;
}

/// Shifts the minimum to 0 and rescales the maximum to 0.9 * cap.
inline QTrueTable shift_to_nonnegative(const Mat& raw, double cap = kDefaultScaleCap) {
  const auto [lo, hi] = std::minmax_element(raw.data().begin(), raw.data().end());
  QTrueTable q{raw, QMode::nonnegative_shifted, cap, *lo, 1.0};
  const double span = *hi - *lo;
  if (span > 0.0) q.gain = 0.9 * cap / span;
  for (double& x : q.table.data()) x = (x - q.offset) * q.gain;
  return q;
}

inline QTrueTable sample_qtrue(std::size_t n, QMode mode, Rng& rng, double cap = kDefaultScaleCap) {
  if (n < 2) throw ConfigError("sample_qtrue: need N >= 2");
  switch (mode) {
    case QMode::pair_code: return pair_code_table(n);
    case QMode::standard_normal: return {rng.normal_matrix(n, n, 1.0), QMode::standard_normal};
    case QMode::nonnegative_shifted: return shift_to_nonnegative(rng.normal_matrix(n, n, 1.0), cap);
  }
  throw ConfigError("sample_qtrue: unknown mode");
}

/// y[0] = 0, y[i] = q(tokens[i-1], tokens[i]) for i >= 1.
inline Vec targets(const TokenSequence& t, const QTrueTable& q) {
  if (q.n() != t.n) throw ConfigError("targets: table size does not match category count");
  Vec y(t.size(), 0.0);
  for (std::size_t i = 1; i < t.size(); ++i)
    y[i] = q(static_cast<std::size_t>(t.cat[i - 1]), static_cast<std::size_t>(t.cat[i]));
  return y;
}

inline void write_contexts_csv(const std::string& path, const std::vector<TokenSequence>& batch) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "context_id,position,category\n";
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t i = 0; i < batch[b].size(); ++i)
      out << b << ',' << i + 1 << ',' << batch[b].cat[i] + 1 << '\n';
}

}  // namespace attnlab
