#pragma once

// Dense linear algebra, statistics and a counter-based RNG shared by every
// other module. Everything runs in 64-bit reals; summation order is fixed
// (row-major, left to right) so results are reproducible bit-for-bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace smitin {

/// Base class for every error raised by the library. `code()` is a short
/// machine-parsable tag (e.g. "dimension_mismatch").
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

using Vector = std::vector<double>;

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw Error("dimension_mismatch", "matrix data length != rows*cols");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw Error("dimension_mismatch", "matmul: a.cols (" + std::to_string(a.cols) +
                                          ") != b.rows (" + std::to_string(b.rows) + ")");
  }
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* o = out.data.data() + i * b.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      const double* br = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

namespace kernel {

// Raw row-major kernels used by the model hot paths. All of them accumulate
// in "axpy" order so each output element is summed left-to-right over k.

/// out[n x m] += a[n x k] * b[k x m]
inline void gemm_acc(const double* a, const double* b, double* out, std::size_t n, std::size_t k,
                     std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out + i * m;
    const double* ar = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double v = ar[p];
      const double* br = b + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += v * br[j];
    }
  }
}

/// out[k x m] += a[n x k]^T * b[n x m]
inline void gemm_tn_acc(const double* a, const double* b, double* out, std::size_t n,
                        std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a + i * k;
    const double* br = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double v = ar[p];
      double* o = out + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += v * br[j];
    }
  }
}

/// out[m] += x[k] * w[k x m]
inline void gemv_acc(const double* x, const double* w, double* out, std::size_t k, std::size_t m) {
  for (std::size_t p = 0; p < k; ++p) {
    const double v = x[p];
    const double* wr = w + p * m;
    for (std::size_t j = 0; j < m; ++j) out[j] += v * wr[j];
  }
}

inline void transpose(const double* a, double* out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = a[r * cols + c];
}

}  // namespace kernel

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("dimension_mismatch", "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// In-place numerically stable softmax (max subtraction).
inline void softmax_inplace(std::span<double> v) {
  if (v.empty()) throw Error("empty_input", "softmax of empty vector");
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (double& x : v) x /= sum;
}

inline Vector softmax(std::span<const double> v) {
  if (!all_finite(v)) throw Error("non_finite", "softmax input contains non-finite values");
  Vector out(v.begin(), v.end());
  softmax_inplace(out);
  return out;
}

inline double sigmoid(double x) {
  // Branches keep exp() from overflowing for large |x|.
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double mean(std::span<const double> xs) {
  if (xs.empty()) throw Error("empty_input", "mean of empty set");
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

/// Middle order statistic; even sizes average the two middle values.
inline double median(std::span<const double> xs) {
  if (xs.empty()) throw Error("empty_input", "median of empty set");
  std::vector<double> s(xs.begin(), xs.end());
  std::sort(s.begin(), s.end());
  const std::size_t n = s.size();
  if (n % 2 == 1) return s[n / 2];
  return 0.5 * (s[n / 2 - 1] + s[n / 2]);
}

/// Population standard deviation (divides by n). Sorting first makes the
/// result exactly permutation-invariant.
inline double stddev(std::span<const double> xs) {
  if (xs.empty()) throw Error("empty_input", "stddev of empty set");
  std::vector<double> s(xs.begin(), xs.end());
  std::sort(s.begin(), s.end());
  const double m = mean(s);
  double acc = 0.0;
  for (double x : s) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(s.size()));
}

/// Counter-based generator: output i is a pure function of (key, i), so a
/// stream can be split into independent substreams by deriving new keys.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(mix(seed ^ 0x5851F42D4C957F2DULL)) {}

  std::uint64_t next_u64() { return mix(key_ + 0x9E3779B97F4A7C15ULL * ++counter_); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw Error("invalid_argument", "uniform_int(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Uniform integer in the closed range [lo, hi].
  std::int64_t uniform_range(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  double normal() {
    // Box-Muller; the second variate is discarded to keep the stream position simple.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  /// Independent stream identified by `id`; does not advance this stream.
  Rng substream(std::uint64_t id) const {
    Rng r;
    r.key_ = mix(key_ ^ mix(id + 0xD1B54A32D192ED03ULL));
    r.counter_ = 0;
    return r;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_int(i)]);
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace smitin
