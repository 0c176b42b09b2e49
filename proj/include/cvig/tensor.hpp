#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

namespace cvig {

/// Raised when operand extents do not fit an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

enum class DType { f32, f64 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "f32 or f64 only");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::string_view dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

inline DType parse_dtype(std::string_view s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw std::invalid_argument("unknown dtype '" + std::string(s) + "'");
}

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

/// Dense row-major tensor. A rank-0 tensor is a scalar with one element.
template <class T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() : data_(1, T{0}) {}

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (numel(shape_) != data_.size())
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + cvig::to_string(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  /// 2-D tensor from nested braces; rows must have equal length.
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor({values.size()}, std::vector<T>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) throw DimensionError("axis out of range");
    return shape_[i];
  }

  std::size_t rows() const { return require_rank2(), shape_[0]; }
  std::size_t cols() const { return require_rank2(), shape_[1]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_.back() + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_.back() + j]; }

  std::span<T> row(std::size_t i) {
    const std::size_t c = shape_.back();
    return {data_.data() + i * c, c};
  }
  std::span<const T> row(std::size_t i) const {
    const std::size_t c = shape_.back();
    return {data_.data() + i * c, c};
  }

  Tensor reshaped(Shape shape) const& {
    Tensor out = *this;
    return std::move(out).reshaped(std::move(shape));
  }
  Tensor reshaped(Shape shape) && {
    if (numel(shape) != data_.size())
      throw DimensionError("cannot reshape " + cvig::to_string(shape_) + " to " + cvig::to_string(shape));
    shape_ = std::move(shape);
    check_extents();
    return std::move(*this);
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t e : shape_)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + cvig::to_string(shape_));
  }
  void require_rank2() const {
    if (shape_.size() != 2) throw DimensionError("expected a matrix, got shape " + cvig::to_string(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Bitwise comparison (distinguishes -0 from +0 and compares NaN payloads).
template <class T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](T x, T y) { return std::memcmp(&x, &y, sizeof(T)) == 0; });
}

}  // namespace cvig

