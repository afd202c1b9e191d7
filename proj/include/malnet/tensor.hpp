#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "malnet/error.hpp"

namespace malnet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold float or double");
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// Dense row-major tensor. Images use NCHW order, so element (n,c,h,w)
/// sits at ((n*C + c)*H + h)*W + w.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_))
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + malnet::to_string(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  constexpr static DType dtype() { return dtype_of<T>(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[offset(n, c, h, w)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset(n, c, h, w)];
  }
  T& at(std::size_t r, std::size_t c) { return data_[r * shape_.at(1) + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_.at(1) + c]; }

  Tensor reshaped(Shape shape) const& {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
  }
  Tensor reshaped(Shape shape) && {
    reshape(std::move(shape));
    return std::move(*this);
  }
  void reshape(Shape shape) {
    if (shape_size(shape) != data_.size())
      throw ShapeError("cannot reshape " + malnet::to_string(shape_) + " to " +
                       malnet::to_string(shape));
    shape_ = std::move(shape);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  bool all_finite() const noexcept {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  T sum() const noexcept { return std::accumulate(data_.begin(), data_.end(), T{0}); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  void require_same_shape(const Tensor& other, const char* what) const {
    if (shape_ != other.shape_)
      throw ShapeError(std::string(what) + ": shapes " + malnet::to_string(shape_) + " and " +
                       malnet::to_string(other.shape_) + " differ");
  }

 private:
  std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  void check_extents() const {
    for (auto e : shape_)
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + malnet::to_string(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> out(t.values().begin(), t.values().end());
  return Tensor<To>(t.shape(), std::move(out));
}

/// Largest absolute elementwise difference; shapes must agree.
template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  a.require_same_shape(b, "max_abs_diff");
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace malnet
