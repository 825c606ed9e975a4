#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ctsev/error.hpp"

namespace ctsev {

using Shape = std::vector<std::size_t>;

/// Run-wide storage precision. Double exists for gradient verification.
enum class Precision { single, double_ };

inline std::string to_string(Precision p) {
  return p == Precision::single ? "single" : "double";
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

/// Dense row-major N-dimensional array (last axis fastest).
///
/// A default-constructed tensor is empty (rank 0, no data) and only serves
/// as a placeholder; every tensor built from a shape has rank >= 1 and
/// extents >= 1.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor full(Shape shape, T fill) { return Tensor(std::move(shape), fill); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{}); }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_, T{}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t extent(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw AxisError("axis " + std::to_string(axis) + " out of range for shape " +
                      shape_string(shape_));
    }
    return shape_[axis];
  }

  std::vector<std::size_t> strides() const {
    std::vector<std::size_t> s(shape_.size(), 1);
    for (std::size_t i = shape_.size(); i-- > 1;) s[i - 1] = s[i] * shape_[i];
    return s;
  }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t flat) { return data_[flat]; }
  const T& operator[](std::size_t flat) const { return data_[flat]; }

  template <typename... Idx>
  T& operator()(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  const T& operator()(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw AxisError("index of rank " + std::to_string(idx.size()) +
                      " used on tensor of shape " + shape_string(shape_));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : idx) {
      if (i >= shape_[axis]) {
        throw AxisError("index " + std::to_string(i) + " out of range on axis " +
                        std::to_string(axis) + " of shape " + shape_string(shape_));
      }
      flat = flat * shape_[axis] + i;
      ++axis;
    }
    return flat;
  }

  /// Same data, new shape of equal element count.
  Tensor reshaped(Shape shape) const& {
    Tensor out = *this;
    return std::move(out).reshaped(std::move(shape));
  }
  Tensor reshaped(Shape shape) && {
    validate_shape(shape);
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " +
                       shape_string(shape));
    }
    shape_ = std::move(shape);
    return std::move(*this);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
    for (auto e : shape) {
      if (e == 0) throw ShapeError("zero extent in shape " + shape_string(shape));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Builds a shape from signed extents, rejecting zero or negative values.
inline Shape make_shape(std::initializer_list<long long> extents) {
  Shape s;
  for (auto e : extents) {
    if (e <= 0) {
      throw ShapeError("non-positive extent " + std::to_string(e) + " in shape");
    }
    s.push_back(static_cast<std::size_t>(e));
  }
  if (s.empty()) throw ShapeError("tensor rank must be at least 1");
  return s;
}

template <typename T, typename Op>
Tensor<T> map2(const Tensor<T>& a, const Tensor<T>& b, Op op) {
  if (a.shape() != b.shape()) {
    throw ShapeError("shape mismatch: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  Tensor<T> out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = op(x[i], y[i]);
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return map2(a, b, [](T x, T y) { return x + y; });
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return map2(a, b, [](T x, T y) { return x - y; });
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return map2(a, b, [](T x, T y) { return x * y; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

/// In-place `a += b`; used for gradient accumulation.
template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("shape mismatch: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
}

/// Sequential left-to-right sum of the flat data.
template <typename T>
T sum_all(const Tensor<T>& a) {
  T acc{};
  for (auto v : a.data()) acc += v;
  return acc;
}

/// Sum along one axis; the axis is dropped (a rank-1 input yields shape [1]).
/// Partial sums accumulate in ascending index order along the axis.
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) {
    throw AxisError("reduce axis " + std::to_string(axis) + " out of range for shape " +
                    shape_string(a.shape()));
  }
  const auto& shape = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t n = shape[axis];

  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out_shape.push_back(shape[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);

  Tensor<T> out(out_shape);
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      const T* row = src.data() + (o * n + k) * inner;
      T* acc = dst.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) acc[i] += row[i];
    }
  }
  return out;
}

/// Index of the maximum along the last axis. Ties go to the largest index.
template <typename T>
Tensor<std::int64_t> argmax_last(const Tensor<T>& a) {
  if (a.empty()) throw ShapeError("argmax of an empty tensor");
  const auto& shape = a.shape();
  const std::size_t n = shape.back();
  Shape out_shape(shape.begin(), shape.end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<std::int64_t> out(out_shape);
  auto src = a.data();
  for (std::size_t r = 0; r < out.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (src[r * n + j] >= src[r * n + best]) best = j;
    }
    out[r] = static_cast<std::int64_t>(best);
  }
  return out;
}

}  // namespace ctsev
