#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedmepd {

/// Raised when tensor extents or vector lengths do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation receives an out-of-range argument (k == 0, bad
/// image size, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major tensor of doubles.
///
/// Most of the library only needs rank 1 and rank 2; higher ranks are kept
/// for serialization and the dataset dump.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  // Matrix view helpers; valid only for rank-2 tensors.
  std::size_t rows() const;
  std::size_t cols() const;
  double& operator()(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }
  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;

  double& operator[](std::size_t i) { return values_[i]; }
  const double& operator[](std::size_t i) const { return values_[i]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  std::vector<double>& storage() { return values_; }

  bool all_finite() const;
  void fill(double v);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

/// xoshiro256** seeded through splitmix64. This is the only generator used
/// anywhere in the project, so a seed pins every run bit-for-bit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n); n must be > 0.
  std::size_t below(std::size_t n);
  /// Standard normal via Box-Muller; consumes exactly two uniforms per call.
  double normal();

  /// Derives an independent stream; the parent advances by one draw.
  Rng fork();

  std::array<std::uint64_t, 4> state() const { return s_; }
  static Rng from_state(const std::array<std::uint64_t, 4>& s);

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::array<std::uint64_t, 4> s_{};
};

template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::swap(items[i - 1], items[rng.below(i)]);
  }
}

// ---- dense kernels --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// aᵀ · b without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Row-wise softmax, stabilized by subtracting the row max.
Tensor softmax_rows(const Tensor& x);

double dot(std::span<const double> u, std::span<const double> v);
double norm2(std::span<const double> u);
double squared_distance(std::span<const double> u, std::span<const double> v);

/// Cosine similarity; exactly 0 when either norm is below 1e-12.
double cosine(std::span<const double> u, std::span<const double> v);

inline constexpr double kCosineZeroNorm = 1e-12;

// ---- clustering -----------------------------------------------------------

struct KMeansResult {
  Tensor centroids;                    // k × C
  std::vector<std::size_t> membership; // one cluster index per point
  std::size_t iterations = 0;
  /// Within-cluster SSE after each Lloyd assignment step.
  std::vector<double> sse_trace;
};

/// Lloyd's algorithm with k-means++ seeding.
///
/// If there are fewer points than clusters, every point becomes its own
/// centroid and the surplus centroids copy existing points cyclically. A
/// cluster that empties during Lloyd iterations is re-seeded at the point
/// farthest from its assigned centroid. The seeding + Lloyd pass is repeated
/// `restarts` times and the lowest-SSE run is kept.
KMeansResult kmeans(const Tensor& points, std::size_t k, Rng& rng, std::size_t max_iters = 100,
                    std::size_t restarts = 10);

/// SSE of a given assignment against the given centroids.
double within_cluster_sse(const Tensor& points, const Tensor& centroids,
                          std::span<const std::size_t> membership);

}  // namespace fedmepd
