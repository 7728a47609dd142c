#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vrwkv {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent tensor shapes or invalid dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required, or a degenerate
/// computation (e.g. a zero denominator).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Dense row-major tensor of rank >= 1.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, Real fill = Real{0})
      : shape_(std::move(shape)),
        data_(std::accumulate(shape_.begin(), shape_.end(), std::size_t{1},
                              std::multiplies<>()),
              fill) {}
  Tensor(std::vector<std::size_t> shape, std::vector<Real> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    std::size_t n = std::accumulate(shape_.begin(), shape_.end(), std::size_t{1},
                                    std::multiplies<>());
    if (n != data_.size()) throw ShapeError("tensor: value count does not match shape");
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  const Real& operator[](std::size_t i) const { return data_[i]; }

  // Rank-2 accessors.
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.size() > 1 ? shape_[1] : 1; }
  Real& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const Real& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  std::span<Real> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const Real> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<Real> data_;
};

/// A batch of tokens laid out on a rows x cols grid with `channels` features.
/// Sequence index inside one batch item is raster order: t = h * cols + w.
template <typename Real>
struct TokenGrid {
  std::size_t batch = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t channels = 0;
  std::vector<Real> data;

  TokenGrid() = default;
  TokenGrid(std::size_t b, std::size_t h, std::size_t w, std::size_t c, Real fill = Real{0})
      : batch(b), rows(h), cols(w), channels(c), data(b * h * w * c, fill) {}

  std::size_t tokens() const { return rows * cols; }
  std::size_t size() const { return data.size(); }

  std::span<Real> token(std::size_t b, std::size_t t) {
    return {data.data() + (b * tokens() + t) * channels, channels};
  }
  std::span<const Real> token(std::size_t b, std::size_t t) const {
    return {data.data() + (b * tokens() + t) * channels, channels};
  }
  std::span<Real> token(std::size_t b, std::size_t h, std::size_t w) {
    return token(b, h * cols + w);
  }
  std::span<const Real> token(std::size_t b, std::size_t h, std::size_t w) const {
    return token(b, h * cols + w);
  }

  /// Copy of batch item `b` as a T x C matrix.
  Tensor<Real> sequence(std::size_t b) const {
    auto first = data.begin() + static_cast<std::ptrdiff_t>(b * tokens() * channels);
    return Tensor<Real>({tokens(), channels},
                        std::vector<Real>(first, first + static_cast<std::ptrdiff_t>(
                                                             tokens() * channels)));
  }
  void set_sequence(std::size_t b, const Tensor<Real>& seq) {
    if (seq.rows() != tokens() || seq.cols() != channels)
      throw ShapeError("token grid: sequence shape mismatch");
    std::copy(seq.values().begin(), seq.values().end(),
              data.begin() + static_cast<std::ptrdiff_t>(b * tokens() * channels));
  }

  bool same_shape(const TokenGrid& o) const {
    return batch == o.batch && rows == o.rows && cols == o.cols && channels == o.channels;
  }

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

template <typename Range>
bool all_finite(const Range& r) {
  return std::all_of(std::begin(r), std::end(r), [](auto v) { return std::isfinite(v); });
}

template <typename RangeA, typename RangeB>
double max_abs_diff(const RangeA& a, const RangeB& b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace vrwkv
