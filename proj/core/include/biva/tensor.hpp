// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "biva/errors.hpp"

namespace biva {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

/// Dense row-major tensor with shared storage. Copies are shallow; use
/// clone() for a deep copy. Always contiguous.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    numel_ = shape_numel(shape_);
    data_ = std::shared_ptr<T[]>(new T[numel_]());
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    std::fill_n(t.data(), t.numel(), v);
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor from_vector(Shape shape, const std::vector<T>& values) {
    Tensor t(std::move(shape));
    if (static_cast<int64_t>(values.size()) != t.numel())
      throw ShapeError("from_vector: size mismatch");
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  const Shape& shape() const { return shape_; }
  int64_t numel() const { return numel_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t ndim() const { return shape_.size(); }
  bool defined() const { return data_ != nullptr; }

  T* data() { return data_.get(); }
  const T* data() const { return data_.get(); }
  T& operator[](int64_t i) { return data_[i]; }
  const T& operator[](int64_t i) const { return data_[i]; }

  /// Shares storage; only the shape changes.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel_)
      throw ShapeError("reshape: numel mismatch " + shape_str(shape_) +
                       " -> " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.numel_ = numel_;
    t.data_ = data_;
    return t;
  }

  Tensor clone() const {
    Tensor t(shape_);
    std::memcpy(t.data(), data(), sizeof(T) * numel_);
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t(shape_);
    for (int64_t i = 0; i < numel_; ++i) t.data()[i] = static_cast<U>(data_[i]);
    return t;
  }

  void fill(T v) { std::fill_n(data(), numel_, v); }
  void zero() { fill(T(0)); }

  void copy_from(const Tensor& other) {
    if (other.numel() != numel_) throw ShapeError("copy_from: numel mismatch");
    std::memcpy(data(), other.data(), sizeof(T) * numel_);
  }

  bool all_finite() const {
    for (int64_t i = 0; i < numel_; ++i)
      if (!std::isfinite(static_cast<double>(data_[i]))) return false;
    return true;
  }

  T sum() const {
    T s = 0;
    for (int64_t i = 0; i < numel_; ++i) s += data_[i];
    return s;
  }

  T max_abs() const {
    T s = 0;
    for (int64_t i = 0; i < numel_; ++i) s = std::max(s, std::abs(data_[i]));
    return s;
  }

  std::vector<T> to_vector() const {
    return std::vector<T>(data(), data() + numel_);
  }

 private:
  Shape shape_;
  int64_t numel_ = 0;
  std::shared_ptr<T[]> data_;
};

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                      const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace biva
