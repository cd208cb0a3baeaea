#pragma once

// Dense row-major matrices of doubles plus a portable seeded generator.
//
// Layout: element (r, c) lives at data[r * cols + c]. Checkpoints rely on
// this order, so it is fixed.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nanodistill/error.hpp"

namespace nanodistill {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                           " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("ragged matrix initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }
  // this += s * o
  void add_scaled(const Matrix& o, double s) {
    require_same_shape(o, "add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
  }

  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }
  // Bitwise element equality.
  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

 private:
  void require_same_shape(const Matrix& o, const char* op) const {
    if (!same_shape(o)) {
      throw DimensionError(std::string("shape mismatch in ") + op + ": " + shape_string() +
                           " vs " + o.shape_string());
    }
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

namespace detail {

inline void axpy(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// Fixed-order four-lane dot product; the order is part of the determinism
// contract, so never let the compiler reassociate it.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

}  // namespace detail

// a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + a.shape_string() + " x " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i).data();
    const double* ar = a.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      if (ar[k] != 0.0) detail::axpy(ar[k], b.row(k).data(), o, n);
    }
  }
  return out;
}

// a * b^T. This is the linear-layer product y = x W^T with W stored out x in.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + a.shape_string() + " x " + b.shape_string() + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ar = a.row(i).data();
    double* o = out.row(i).data();
    for (std::size_t j = 0; j < b.rows(); ++j) o[j] = detail::dot(ar, b.row(j).data(), a.cols());
  }
  return out;
}

// a^T * b, accumulated into `out` when given (out += a^T b).
inline void matmul_tn_accumulate(const Matrix& a, const Matrix& b, Matrix& out) {
  if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
    throw DimensionError("matmul_tn: " + a.shape_string() + "^T x " + b.shape_string() +
                         " into " + out.shape_string());
  }
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* ar = a.row(k).data();
    const double* br = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      if (ar[i] != 0.0) detail::axpy(ar[i], br, out.row(i).data(), b.cols());
    }
  }
}

inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  Matrix out(a.cols(), b.cols());
  matmul_tn_accumulate(a, b, out);
  return out;
}

inline double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.values()) s += v * v;
  return std::sqrt(s);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw DimensionError("max_abs_diff: shape mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    d = std::max(d, std::abs(a.values()[i] - b.values()[i]));
  return d;
}

// Lower-triangular L with L L^T = m. Only the lower triangle of m is read.
inline Matrix cholesky(const Matrix& m) {
  if (m.rows() != m.cols()) throw DimensionError("cholesky: non-square " + m.shape_string());
  const std::size_t n = m.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = m(j, j) - detail::dot(l.row(j).data(), l.row(j).data(), j);
    if (!(d > 0.0)) throw NotPositiveDefinite(j, d);
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      l(i, j) = (m(i, j) - detail::dot(l.row(i).data(), l.row(j).data(), j)) / ljj;
    }
  }
  return l;
}

// Inverse of a symmetric positive definite matrix via its Cholesky factor.
inline Matrix spd_inverse(const Matrix& m) {
  const Matrix l = cholesky(m);
  const std::size_t n = l.rows();
  // Linv: forward substitution column by column, stored transposed for row access.
  Matrix linv(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    linv(i, i) = 1.0 / l(i, i);
    for (std::size_t j = 0; j < i; ++j) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k) s += l(i, k) * linv(k, j);
      linv(i, j) = -s / l(i, i);
    }
  }
  // m^-1 = Linv^T Linv
  Matrix inv = matmul_tn(linv, linv);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double avg = 0.5 * (inv(i, j) + inv(j, i));
      inv(i, j) = avg;
      inv(j, i) = avg;
    }
  return inv;
}

// xoshiro256** seeded through splitmix64. Portable: every value is a pure
// function of the seed, independent of the standard library in use.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw InvalidArgument("Rng::below(0)");
    const std::uint64_t limit = std::uint64_t(-1) - (std::uint64_t(-1) % n);
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  // Standard normal, Box-Muller with the spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }
  template <typename T>
  void shuffle(std::vector<T>& items) {
    shuffle(std::span<T>(items));
  }

  // Independent child stream keyed by `stream`.
  Rng fork(std::uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

  static std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t x = seed ^ (stream * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull);
    splitmix64(x);
    return splitmix64(x);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev = 1.0) {
  if (rows == 0 || cols == 0) throw InvalidArgument("gaussian: empty shape");
  Matrix m(rows, cols);
  for (double& v : m.values()) v = stddev * rng.normal();
  return m;
}

// 64-bit FNV-1a; used for content keys (request hashes, mock seeding).
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace nanodistill
