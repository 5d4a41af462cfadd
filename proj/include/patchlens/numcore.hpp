#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace patchlens {

/// Dense row-major float matrix. Vectors are carried as 1 x n matrices or as
/// plain std::vector<float> where no shape is needed.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f);
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  const std::vector<float>& storage() const { return data_; }

  /// Appends one column; `values` must have rows() entries.
  void append_col(std::span<const float> values);
  /// Appends one row; `values` must have cols() entries (or define cols if empty).
  void append_row(std::span<const float> values);

  std::string shape_string() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// True when both shapes match and every element has the same bit pattern.
bool bitwise_equal(const Matrix& a, const Matrix& b);
bool bitwise_equal(std::span<const float> a, std::span<const float> b);

bool all_finite(std::span<const float> values);

// Dense matrix product. Each output cell is a float64 accumulation over the
// inner index in ascending order, rounded once to float32, so the result is
// independent of how rows are distributed across threads.
Matrix matmul(const Matrix& a, const Matrix& b);

/// out[r] += bias for every row.
void add_row_bias(Matrix& m, std::span<const float> bias);

/// Float64 dot product in index order.
double dot(std::span<const float> a, std::span<const float> b);

/// Temperature softmax with max subtraction. Probabilities are float64.
std::vector<double> softmax(std::span<const float> logits, double temperature);
std::vector<double> softmax(std::span<const double> logits, double temperature);

inline constexpr float kLayerNormEps = 1e-5f;

/// In-place layer normalization of one vector.
void layer_norm(std::span<float> x, std::span<const float> gamma, std::span<const float> beta,
                float eps = kLayerNormEps);

/// Row-wise layer normalization, returning a new matrix.
Matrix layer_norm_rows(const Matrix& x, std::span<const float> gamma, std::span<const float> beta,
                       float eps = kLayerNormEps);

inline float relu(float x) { return x > 0.0f ? x : 0.0f; }
void relu_inplace(std::span<float> x);

// Counter-based random stream. The value at counter c is a pure function of
// (master_seed, domain_tag, c): a SplitMix64 sequence whose starting state is
// derived from the seed and a 64-bit FNV-1a hash of the tag.
class RngStream {
 public:
  RngStream(std::uint64_t master_seed, std::string_view domain_tag, std::uint64_t counter = 0);

  std::uint64_t master_seed() const { return master_seed_; }
  const std::string& domain_tag() const { return tag_; }
  std::uint64_t counter() const { return counter_; }

  /// Value at `counter` without touching the stream.
  std::uint64_t at(std::uint64_t counter) const;

  /// Value at the current counter, then advances it.
  std::uint64_t next_u64();

  /// Uniform double in [0, 1) with 53 random bits.
  double next_unit();

 private:
  std::uint64_t master_seed_;
  std::string tag_;
  std::uint64_t key_;
  std::uint64_t counter_;
};

/// Uniform draw in [lo, hi); advances the stream by one.
double rng_uniform(RngStream& stream, double lo, double hi);

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view s);

}  // namespace patchlens
