#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lvsnet/core/errors.hpp"
#include "lvsnet/core/shape.hpp"

namespace lvsnet {

// Dense NHWC tensor. Value semantics; all layer math lives in nn/ops.hpp.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape_(s), data_(static_cast<size_t>(s.size()), fill) {}
  Tensor(Shape s, std::vector<T> data) : shape_(s), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_.size()) {
      throw shape_error("tensor data size " + std::to_string(data_.size()) +
                        " does not match shape " + shape_.str());
    }
  }

  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return shape_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  T& at(int n, int h, int w, int c) { return data_[static_cast<size_t>(index(n, h, w, c))]; }
  const T& at(int n, int h, int w, int c) const {
    return data_[static_cast<size_t>(index(n, h, w, c))];
  }

  std::int64_t index(int n, int h, int w, int c) const {
    return ((static_cast<std::int64_t>(n) * shape_.h + h) * shape_.w + w) * shape_.c + c;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void add_scaled(const Tensor& other, T scale) {
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
  }

  T max_abs() const {
    T m = T(0);
    for (T v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::int64_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
    return out;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_{};
  std::vector<T> data_{};
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw shape_error("max_abs_diff: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  T m = T(0);
  for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace lvsnet
