#pragma once

// Dense row-major matrices, the handful of kernels the rest of the library
// needs, and the seeded random source every experiment draws from.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace attnlab {

using Vec = std::vector<double>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (!std::isfinite(fill)) throw NonFiniteError("Mat: non-finite fill value");
  }
  Mat(std::size_t rows, std::size_t cols, Vec data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
      throw ShapeError("Mat: data length " + std::to_string(data_.size()) +
                       " does not match " + shape_string(rows, cols));
    }
    require_finite("Mat");
  }
  Mat(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("Mat: ragged initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
    require_finite("Mat");
  }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Mat column(const Vec& v) { return Mat(v.size(), 1, v); }
  static Mat row(const Vec& v) { return Mat(1, v.size(), v); }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const Vec& values() const { return data_; }
  double* row_ptr(std::size_t r) { return data_.data() + r * cols_; }
  const double* row_ptr(std::size_t r) const { return data_.data() + r * cols_; }

  std::string shape() const { return shape_string(rows_, cols_); }
  static std::string shape_string(std::size_t r, std::size_t c) {
    return std::to_string(r) + "x" + std::to_string(c);
  }

  Mat transposed() const {
    Mat t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  Mat block(std::size_t r0, std::size_t c0, std::size_t nr, std::size_t nc) const {
    if (r0 + nr > rows_ || c0 + nc > cols_) {
      throw ShapeError("Mat::block: " + shape_string(nr, nc) + " at (" + std::to_string(r0) +
                       "," + std::to_string(c0) + ") exceeds " + shape());
    }
    Mat b(nr, nc);
    for (std::size_t r = 0; r < nr; ++r)
      std::copy_n(row_ptr(r0 + r) + c0, nc, b.row_ptr(r));
    return b;
  }

  void set_block(std::size_t r0, std::size_t c0, const Mat& b) {
    if (r0 + b.rows() > rows_ || c0 + b.cols() > cols_) {
      throw ShapeError("Mat::set_block: " + b.shape() + " does not fit in " + shape());
    }
    for (std::size_t r = 0; r < b.rows(); ++r)
      std::copy_n(b.row_ptr(r), b.cols(), row_ptr(r0 + r) + c0);
  }

  Vec col(std::size_t c) const {
    Vec v(rows_);
    for (std::size_t r = 0; r < rows_; ++r) v[r] = (*this)(r, c);
    return v;
  }
  Vec row_vec(std::size_t r) const { return Vec(row_ptr(r), row_ptr(r) + cols_); }

  Vec diagonal() const {
    Vec d(std::min(rows_, cols_));
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = (*this)(i, i);
    return d;
  }

  Mat& operator+=(const Mat& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Mat& operator-=(const Mat& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Mat& operator*=(double s) {
    for (double& x : data_) x *= s;
    return *this;
  }
  friend Mat operator+(Mat a, const Mat& b) { return a += b; }
  friend Mat operator-(Mat a, const Mat& b) { return a -= b; }
  friend Mat operator*(Mat a, double s) { return a *= s; }
  friend Mat operator*(double s, Mat a) { return a *= s; }

  Mat hadamard(const Mat& o) const {
    require_same_shape(o, "hadamard");
    Mat h = *this;
    for (std::size_t i = 0; i < data_.size(); ++i) h.data_[i] *= o.data_[i];
    return h;
  }

  double sum() const {
    double s = 0.0;
    for (double x : data_) s += x;
    return s;
  }
  double max_abs() const {
    double m = 0.0;
    for (double x : data_) m = std::max(m, std::abs(x));
    return m;
  }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }
  void require_finite(const char* where) const {
    if (!all_finite()) throw NonFiniteError(std::string(where) + ": non-finite entry in " + shape());
  }

  bool operator==(const Mat& o) const = default;

 private:
  void require_same_shape(const Mat& o, const char* op) const {
    if (rows_ != o.rows_ || cols_ != o.cols_) {
      throw ShapeError(std::string("Mat ") + op + ": " + shape() + " vs " + o.shape());
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vec data_;
};

inline double max_abs_diff(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("max_abs_diff: " + a.shape() + " vs " + b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: length mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// M x M matrix with ones on the superdiagonal: entry (i, j) is 1 iff i = j - 1.
/// Right-multiplying moves every column one place to the right; e_{i}^T D e_{j}
/// is 1 exactly when position i sits immediately left of position j.
inline Mat shift_right(std::size_t m) {
  Mat d(m, m);
  for (std::size_t j = 1; j < m; ++j) d(j - 1, j) = 1.0;
  return d;
}

/// M x M matrix with ones on the subdiagonal (the transpose of shift_right):
/// maps one-hot position j onto j + 1 and the last position onto zero.
inline Mat shift_down(std::size_t m) {
  Mat s(m, m);
  for (std::size_t i = 1; i < m; ++i) s(i, i - 1) = 1.0;
  return s;
}

namespace detail {
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
inline Eigen::Map<const RowMajor> view(const Mat& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
inline Eigen::Map<RowMajor> view(Mat& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
}  // namespace detail

namespace detail {
/// c = op(a) op(b), or c += op(a) op(b) when accumulating; op transposes when
/// the flag is set. Shapes must already agree; no finiteness scan.
inline void gemm_into(Mat& c, const Mat& a, bool ta, const Mat& b, bool tb, bool accumulate) {
  auto C = view(c);
  const auto A = view(a);
  const auto B = view(b);
  if (accumulate) {
    if (!ta && !tb) C.noalias() += A * B;
    else if (ta && !tb) C.noalias() += A.transpose() * B;
    else if (!ta && tb) C.noalias() += A * B.transpose();
    else C.noalias() += A.transpose() * B.transpose();
  } else {
    if (!ta && !tb) C.noalias() = A * B;
    else if (ta && !tb) C.noalias() = A.transpose() * B;
    else if (!ta && tb) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
}
}  // namespace detail

// Products of three or more factors are always formed left to right:
// matmul(matmul(a, b), c). Callers rely on this for bit-reproducibility.
inline Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + a.shape() + " * " + b.shape());
  Mat c(a.rows(), b.cols());
  if (a.cols() > 0) detail::view(c).noalias() = detail::view(a) * detail::view(b);
  c.require_finite("matmul");
  return c;
}

/// a^T * b without materializing the transpose.
inline Mat matmul_tn(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows())
    throw ShapeError("matmul_tn: (" + a.shape() + ")^T * " + b.shape());
  Mat c(a.cols(), b.cols());
  if (a.rows() > 0) detail::view(c).noalias() = detail::view(a).transpose() * detail::view(b);
  c.require_finite("matmul_tn");
  return c;
}

/// a * b^T without materializing the transpose.
inline Mat matmul_nt(const Mat& a, const Mat& b) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: " + a.shape() + " * (" + b.shape() + ")^T");
  Mat c(a.rows(), b.rows());
  if (a.cols() > 0) detail::view(c).noalias() = detail::view(a) * detail::view(b).transpose();
  c.require_finite("matmul_nt");
  return c;
}

/// out(i, j) = max(0, m(i, j) + bias[i]); the bias is broadcast over columns.
inline Mat relu_bias(const Mat& m, std::span<const double> bias) {
  if (bias.size() != m.rows())
    throw ShapeError("relu_bias: bias length " + std::to_string(bias.size()) + " vs " + m.shape());
  Mat out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = std::max(0.0, m(r, c) + bias[r]);
  out.require_finite("relu_bias");
  return out;
}

inline Mat relu(const Mat& m) { return relu_bias(m, Vec(m.rows(), 0.0)); }

/// Column i becomes a softmax over rows j <= i; entries with j > i are exactly zero.
inline Mat softmax_causal_columns(const Mat& scores) {
  if (scores.rows() != scores.cols())
    throw ShapeError("softmax_causal_columns: expected square, got " + scores.shape());
  const std::size_t m = scores.rows();
  Mat w(m, m);
  for (std::size_t i = 0; i < m; ++i) {
    double peak = scores(0, i);
    for (std::size_t j = 1; j <= i; ++j) peak = std::max(peak, scores(j, i));
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      w(j, i) = std::exp(scores(j, i) - peak);
      z += w(j, i);
    }
    for (std::size_t j = 0; j <= i; ++j) w(j, i) /= z;
  }
  w.require_finite("softmax_causal_columns");
  return w;
}

/// Full (non-causal) column softmax.
inline Mat softmax_columns(const Mat& scores) {
  Mat w(scores.rows(), scores.cols());
  for (std::size_t i = 0; i < scores.cols(); ++i) {
    double peak = scores(0, i);
    for (std::size_t j = 1; j < scores.rows(); ++j) peak = std::max(peak, scores(j, i));
    double z = 0.0;
    for (std::size_t j = 0; j < scores.rows(); ++j) {
      w(j, i) = std::exp(scores(j, i) - peak);
      z += w(j, i);
    }
    for (std::size_t j = 0; j < scores.rows(); ++j) w(j, i) /= z;
  }
  w.require_finite("softmax_columns");
  return w;
}

/// Standardizes v to mean 0 and variance 1 (population variance, eps added
/// under the square root), then applies the optional per-entry gain and shift.
inline Vec layer_norm(std::span<const double> v, double eps, std::span<const double> gain = {},
                      std::span<const double> shift = {}) {
  const std::size_t n = v.size();
  if (n < 2) throw ShapeError("layer_norm: need at least 2 entries");
  if (!gain.empty() && gain.size() != n) throw ShapeError("layer_norm: gain length");
  if (!shift.empty() && shift.size() != n) throw ShapeError("layer_norm: shift length");
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + eps);
  Vec out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = (v[i] - mean) * inv;
    if (!gain.empty()) out[i] *= gain[i];
    if (!shift.empty()) out[i] += shift[i];
    if (!std::isfinite(out[i])) throw NonFiniteError("layer_norm: non-finite output");
  }
  return out;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seeded 64-bit generator. Single owner; derive independent sub-streams with
/// split() instead of sharing one instance.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  std::uint64_t seed() const { return seed_; }

  /// Deterministic child stream; the same (seed, stream) pair always yields the
  /// same child regardless of how much the parent has been drawn from.
  Rng split(std::uint64_t stream) const {
    return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x632be59bd9b4e019ULL)));
  }

  std::uint64_t next_u64() { return engine_(); }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

  /// Index drawn from the given (already validated) probability vector.
  std::size_t categorical(std::span<const double> probabilities) {
    const double u = uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
      acc += probabilities[i];
      if (u < acc) return i;
    }
    // u landed in the rounding gap above the final partial sum
    for (std::size_t i = probabilities.size(); i-- > 0;)
      if (probabilities[i] > 0.0) return i;
    return 0;
  }

  Mat normal_matrix(std::size_t rows, std::size_t cols, double stddev) {
    Mat m(rows, cols);
    for (double& x : m.data()) x = normal(0.0, stddev);
    return m;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace attnlab
