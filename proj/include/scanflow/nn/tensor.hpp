#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "scanflow/error.hpp"

namespace scanflow::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

/// Dense row-major n-dimensional array.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw ShapeError("data length " + std::to_string(data_.size()) + " != " +
                       shape_str(shape_));
  }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != data_.size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  /// Elements [begin, end) along the leading axis.
  Tensor rows(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || begin > end || end > shape_[0])
      throw ShapeError("row range out of bounds for " + shape_str(shape_));
    std::size_t stride = data_.size() / std::max<std::size_t>(shape_[0], 1);
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(std::move(s), std::vector<T>(data_.begin() + begin * stride,
                                               data_.begin() + end * stride));
  }

  /// Gather rows along the leading axis.
  Tensor gather(std::span<const std::size_t> idx) const {
    std::size_t stride = shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0];
    Shape s = shape_;
    s[0] = idx.size();
    std::vector<T> out;
    out.reserve(idx.size() * stride);
    for (auto i : idx) {
      if (i >= shape_[0]) throw ShapeError("gather index out of range");
      out.insert(out.end(), data_.begin() + i * stride, data_.begin() + (i + 1) * stride);
    }
    return Tensor(std::move(s), std::move(out));
  }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Concatenate along the leading axis; trailing dims must agree.
template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(),
                                          b.shape().begin() + 1))
    throw ShapeError("concat " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<T> d(a.vec());
  d.insert(d.end(), b.vec().begin(), b.vec().end());
  return Tensor<T>(std::move(s), std::move(d));
}

}  // namespace scanflow::nn
