#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "hico/error.hpp"
#include "hico/rng.hpp"

namespace hico {

/// Dense shape of rank 1..4. Rank-4 shapes are [batch, channels, height, width].
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) { validate(); }

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_[i]; }
  const std::vector<std::size_t>& dims() const { return dims_; }

  std::size_t numel() const {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
  }

  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  void validate() const {
    require(!dims_.empty() && dims_.size() <= 4, ErrorKind::InvalidShape,
            "rank must be in 1..4, got " + std::to_string(dims_.size()));
    for (std::size_t d : dims_) require(d >= 1, ErrorKind::InvalidShape, "zero-sized dimension");
  }

  std::vector<std::size_t> dims_;
};

namespace init {
struct Zeros {};
struct Ones {};
struct Constant { double value; };
struct Uniform { double lo; double hi; std::uint64_t seed; };
/// Uniform in +-sqrt(6 / fan_in); fan_in is every dimension but the output one.
struct Kaiming { std::uint64_t seed; std::size_t fan_in; };
}  // namespace init

using Init = std::variant<init::Zeros, init::Ones, init::Constant, init::Uniform, init::Kaiming>;

/// Row-major double-precision array. Plain value type; graph bookkeeping
/// lives in the Tape, not here.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_.numel(), 0.0) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_.numel(), ErrorKind::ShapeError,
            "data length " + std::to_string(data_.size()) + " does not match shape " + shape_.str());
  }

  static Tensor create(const Shape& shape, const Init& how) {
    Tensor t(shape);
    std::visit(
        [&t](const auto& spec) {
          using T = std::decay_t<decltype(spec)>;
          if constexpr (std::is_same_v<T, init::Ones>) {
            t.fill(1.0);
          } else if constexpr (std::is_same_v<T, init::Constant>) {
            t.fill(spec.value);
          } else if constexpr (std::is_same_v<T, init::Uniform>) {
            SplitMix64 rng(spec.seed);
            for (double& v : t.data_) v = rng.uniform(spec.lo, spec.hi);
          } else if constexpr (std::is_same_v<T, init::Kaiming>) {
            require(spec.fan_in >= 1, ErrorKind::InvalidShape, "kaiming fan_in must be positive");
            const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in));
            SplitMix64 rng(spec.seed);
            for (double& v : t.data_) v = rng.uniform(-bound, bound);
          }
        },
        how);
    return t;
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

  Tensor reshaped(Shape shape) const {
    require(shape.numel() == numel(), ErrorKind::ShapeError,
            "cannot reshape " + shape_.str() + " to " + shape.str());
    return Tensor(std::move(shape), data_);
  }

  /// Rows [begin, end) along the leading dimension.
  Tensor rows(std::size_t begin, std::size_t end) const {
    require(begin < end && end <= shape_[0], ErrorKind::ShapeError, "row range out of bounds");
    std::vector<std::size_t> dims = shape_.dims();
    const std::size_t stride = numel() / dims[0];
    dims[0] = end - begin;
    return Tensor(Shape(dims), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                   data_.begin() + static_cast<std::ptrdiff_t>(end * stride)));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Stacks tensors sharing trailing dimensions along the leading one.
inline Tensor concat_rows(std::span<const Tensor> parts) {
  require(!parts.empty(), ErrorKind::ShapeError, "concat of nothing");
  std::vector<std::size_t> dims = parts[0].shape().dims();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require(p.shape().rank() == dims.size(), ErrorKind::ShapeError, "concat rank mismatch");
    for (std::size_t i = 1; i < dims.size(); ++i)
      require(p.dim(i) == dims[i], ErrorKind::ShapeError, "concat trailing dims mismatch");
    total += p.dim(0);
  }
  dims[0] = total;
  Tensor out{Shape(dims)};
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    std::copy(p.vec().begin(), p.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.numel();
  }
  return out;
}

}  // namespace hico
