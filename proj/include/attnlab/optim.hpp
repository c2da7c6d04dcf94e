#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "attnlab/context.hpp"
#include "attnlab/linalg.hpp"

namespace attnlab {

enum class Optimizer { quasi_newton, adaptive_gd };

inline std::string to_string(Optimizer o) { return o == Optimizer::quasi_newton ? "quasi-newton" : "adaptive-gd"; }

inline Optimizer parse_optimizer(const std::string& s) {
  if (s == "quasi-newton" || s == "lbfgs") return Optimizer::quasi_newton;
  if (s == "adaptive-gd" || s == "adam") return Optimizer::adaptive_gd;
  throw ConfigError("unknown optimizer '" + s + "' (expected quasi-newton or adaptive-gd)");
}

/// Returns the objective at x; fills *grad when grad is non-null.
using Objective = std::function<double(const Vec& x, Vec* grad)>;

namespace detail {
inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}
inline void axpy(double a, const Vec& x, Vec& y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}
}  // namespace detail

struct LbfgsOptions {
  std::size_t history = 10;
  double c1 = 1e-4;  // sufficient decrease
  double shrink = 0.5;
  std::size_t max_backtracks = 40;
};

/// Limited-memory quasi-Newton with a backtracking (Armijo) line search. The
/// curvature history survives between minimize() calls, so a sequence of calls
/// on freshly sampled batches behaves like one long run.
class Lbfgs {
 public:
  explicit Lbfgs(LbfgsOptions o = {}) : opt_(o) {}

  void reset() {
    s_.clear();
    y_.clear();
  }

  /// Runs `iterations` line-searched steps on f starting from x. A failed line
  /// search leaves x where it was and clears the history. Returns f at the
  /// final x.
  double minimize(Vec& x, const Objective& f, std::size_t iterations) {
    Vec g(x.size());
    double fx = f(x, &g);
    for (std::size_t it = 0; it < iterations; ++it) {
      Vec d = direction(g);
      double slope = detail::dot(g, d);
      if (!(slope < 0.0)) {
        reset();
        d = g;
        for (double& v : d) v = -v;
        slope = detail::dot(g, d);
        if (!(slope < 0.0)) break;  // zero gradient
      }
      double t = 1.0;
      if (first_) {
        double l1 = 0.0;
        for (double v : g) l1 += std::abs(v);
        t = std::min(1.0, 1.0 / l1);
      }
      Vec xt(x.size()), gt(x.size());
      double ft = 0.0;
      bool accepted = false;
      for (std::size_t bt = 0; bt <= opt_.max_backtracks; ++bt) {
        for (std::size_t i = 0; i < x.size(); ++i) xt[i] = x[i] + t * d[i];
        try {
          ft = f(xt, &gt);
        } catch (const NonFiniteError&) {
          ft = std::numeric_limits<double>::infinity();
        }
        if (std::isfinite(ft) && ft <= fx + opt_.c1 * t * slope) {
          accepted = true;
          break;
        }
        t *= opt_.shrink;
      }
      if (!accepted) {
        reset();
        break;
      }
      first_ = false;
      Vec s(x.size()), y(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) {
        s[i] = xt[i] - x[i];
        y[i] = gt[i] - g[i];
      }
      if (detail::dot(s, y) > 1e-10 * std::sqrt(detail::dot(s, s) * detail::dot(y, y))) {
        s_.push_back(std::move(s));
        y_.push_back(std::move(y));
        if (s_.size() > opt_.history) {
          s_.pop_front();
          y_.pop_front();
        }
      }
      x = std::move(xt);
      g = std::move(gt);
      fx = ft;
    }
    return fx;
  }

 private:
  Vec direction(const Vec& g) const {
    Vec q = g;
    const std::size_t k = s_.size();
    std::vector<double> alpha(k), rho(k);
    for (std::size_t i = k; i-- > 0;) {
      rho[i] = 1.0 / detail::dot(y_[i], s_[i]);
      alpha[i] = rho[i] * detail::dot(s_[i], q);
      detail::axpy(-alpha[i], y_[i], q);
    }
    if (k > 0) {
      const double gamma = detail::dot(s_.back(), y_.back()) / detail::dot(y_.back(), y_.back());
      for (double& v : q) v *= gamma;
    }
    for (std::size_t i = 0; i < k; ++i) {
      const double beta = rho[i] * detail::dot(y_[i], q);
      detail::axpy(alpha[i] - beta, s_[i], q);
    }
    for (double& v : q) v = -v;
    return q;
  }

  LbfgsOptions opt_;
  std::deque<Vec> s_, y_;
  bool first_ = true;
};

struct AdamOptions {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamOptions o = {}) : opt_(o) {}

  /// `iterations` steps on f from x; returns f at the final x.
  double minimize(Vec& x, const Objective& f, std::size_t iterations) {
    if (m_.size() != x.size()) {
      m_.assign(x.size(), 0.0);
      v_.assign(x.size(), 0.0);
    }
    Vec g(x.size());
    for (std::size_t it = 0; it < iterations; ++it) {
      f(x, &g);
      ++t_;
      const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
      for (std::size_t i = 0; i < x.size(); ++i) {
        m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g[i];
        v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g[i] * g[i];
        x[i] -= opt_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + opt_.eps);
      }
    }
    return f(x, nullptr);
  }

 private:
  AdamOptions opt_;
  Vec m_, v_;
  std::size_t t_ = 0;
};

}  // namespace attnlab
