#include "patchlens/numcore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include <fmt/format.h>

namespace patchlens {

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw std::invalid_argument(fmt::format("matrix data length {} does not match shape {}x{}",
                                            data_.size(), rows_, cols_));
  }
}

void Matrix::append_col(std::span<const float> values) {
  if (values.size() != rows_) {
    throw std::invalid_argument(
        fmt::format("append_col: {} values for a matrix with {} rows", values.size(), rows_));
  }
  std::vector<float> next(rows_ * (cols_ + 1));
  for (std::size_t r = 0; r < rows_; ++r) {
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(r * cols_), cols_,
                next.begin() + static_cast<std::ptrdiff_t>(r * (cols_ + 1)));
    next[r * (cols_ + 1) + cols_] = values[r];
  }
  data_ = std::move(next);
  ++cols_;
}

void Matrix::append_row(std::span<const float> values) {
  if (rows_ == 0 && cols_ == 0) cols_ = values.size();
  if (values.size() != cols_) {
    throw std::invalid_argument(
        fmt::format("append_row: {} values for a matrix with {} cols", values.size(), cols_));
  }
  data_.insert(data_.end(), values.begin(), values.end());
  ++rows_;
}

std::string Matrix::shape_string() const { return fmt::format("[{}x{}]", rows_, cols_); }

bool bitwise_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() &&
         (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && bitwise_equal(a.data(), b.data());
}

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument(
        fmt::format("matmul: shape mismatch {} x {}", a.shape_string(), b.shape_string()));
  }
  const std::size_t n = a.rows();
  const std::size_t inner = a.cols();
  const std::size_t m = b.cols();
  Matrix out(n, m);
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* po = out.data().data();
  // Small products from the forward pass stay on the calling thread.
  const bool wide = n * inner * m >= (1u << 18);

#pragma omp parallel for schedule(static) if (wide)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    std::vector<double> acc(m, 0.0);
    const float* arow = pa + static_cast<std::size_t>(i) * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = arow[k];
      const float* brow = pb + k * m;
      for (std::size_t j = 0; j < m; ++j) acc[j] += aik * static_cast<double>(brow[j]);
    }
    float* orow = po + static_cast<std::size_t>(i) * m;
    for (std::size_t j = 0; j < m; ++j) orow[j] = static_cast<float>(acc[j]);
  }
  return out;
}

void add_row_bias(Matrix& m, std::span<const float> bias) {
  if (bias.size() != m.cols()) {
    throw std::invalid_argument(
        fmt::format("add_row_bias: bias of length {} for {}", bias.size(), m.shape_string()));
  }
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
  }
}

double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(fmt::format("dot: length mismatch {} vs {}", a.size(), b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

namespace {

template <typename T>
std::vector<double> softmax_impl(std::span<const T> logits, double temperature) {
  if (!(temperature > 0.0)) {
    throw std::invalid_argument(fmt::format("softmax: temperature must be > 0, got {}", temperature));
  }
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  double hi = -std::numeric_limits<double>::infinity();
  for (T v : logits) {
    if (!std::isfinite(static_cast<double>(v))) throw std::invalid_argument("softmax: non-finite logit");
    hi = std::max(hi, static_cast<double>(v));
  }
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp((static_cast<double>(logits[i]) - hi) / temperature);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

}  // namespace

std::vector<double> softmax(std::span<const float> logits, double temperature) {
  return softmax_impl(logits, temperature);
}

std::vector<double> softmax(std::span<const double> logits, double temperature) {
  return softmax_impl(logits, temperature);
}

void layer_norm(std::span<float> x, std::span<const float> gamma, std::span<const float> beta,
                float eps) {
  if (gamma.size() != x.size() || beta.size() != x.size()) {
    throw std::invalid_argument("layer_norm: parameter length mismatch");
  }
  const auto n = static_cast<double>(x.size());
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = static_cast<float>((x[i] - mean) * inv * gamma[i] + beta[i]);
  }
}

Matrix layer_norm_rows(const Matrix& x, std::span<const float> gamma, std::span<const float> beta,
                       float eps) {
  Matrix out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) layer_norm(out.row(r), gamma, beta, eps);
  return out;
}

void relu_inplace(std::span<float> x) {
  for (float& v : x) v = relu(v);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

RngStream::RngStream(std::uint64_t master_seed, std::string_view domain_tag, std::uint64_t counter)
    : master_seed_(master_seed),
      tag_(domain_tag),
      key_(splitmix64(master_seed ^ splitmix64(fnv1a64(domain_tag)))),
      counter_(counter) {}

std::uint64_t RngStream::at(std::uint64_t counter) const {
  // splitmix64 adds the golden increment itself, so this is the counter-th
  // output of a SplitMix64 generator started from key_.
  return splitmix64(key_ + counter * 0x9E3779B97F4A7C15ull);
}

std::uint64_t RngStream::next_u64() { return at(counter_++); }

double RngStream::next_unit() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double rng_uniform(RngStream& stream, double lo, double hi) {
  if (!(lo < hi)) {
    throw std::invalid_argument(fmt::format("rng_uniform: need lo < hi, got [{}, {})", lo, hi));
  }
  const double v = lo + stream.next_unit() * (hi - lo);
  return v < hi ? v : std::nextafter(hi, lo);
}

}  // namespace patchlens
