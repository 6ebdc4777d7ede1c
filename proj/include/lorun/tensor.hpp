#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lorun/errors.hpp"

namespace lorun {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-dimensional array backed by an Eigen vector.
///
/// Every constructed tensor has strictly positive extents and
/// `shape_size(shape()) == size()`. A default-constructed tensor is empty
/// (no shape, no data) and only serves as a placeholder.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape();
    data_ = Vector::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (data_.size() != shape_size(shape_))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
    check_shape();
    if (static_cast<Index>(values.size()) != shape_size(shape_))
      throw DimensionError("initializer length does not match shape " + shape_str(shape_));
    data_.resize(static_cast<Index>(values.size()));
    std::copy(values.begin(), values.end(), data_.data());
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static Tensor scalar(Scalar value) { return constant({1}, value); }

  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const {
    if (axis < 0 || axis >= ndim())
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    return shape_[static_cast<std::size_t>(axis)];
  }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Vector& vec() { return data_; }
  const Vector& vec() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Row-major multi-index access; the number of indices must equal ndim().
  template <typename... I>
  Scalar& operator()(I... idx) {
    return data_[offset({static_cast<Index>(idx)...})];
  }
  template <typename... I>
  Scalar operator()(I... idx) const {
    return data_[offset({static_cast<Index>(idx)...})];
  }

  /// View of a 2-D tensor as a row-major Eigen matrix.
  MatrixMap matrix() {
    require_2d();
    return MatrixMap(data_.data(), shape_[0], shape_[1]);
  }
  ConstMatrixMap matrix() const {
    require_2d();
    return ConstMatrixMap(data_.data(), shape_[0], shape_[1]);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    if (empty()) return {};
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (Index e : shape_)
      if (e <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
  }
  void require_2d() const {
    if (shape_.size() != 2) throw DimensionError("expected a 2-D tensor, got " + shape_str(shape_));
  }
  Index offset(std::initializer_list<Index> idx) const {
    if (idx.size() != shape_.size())
      throw DimensionError("index arity does not match shape " + shape_str(shape_));
    Index off = 0;
    std::size_t a = 0;
    for (Index i : idx) off = off * shape_[a++] + i;
    return off;
  }

  Shape shape_;
  Vector data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

/// Inner product of two equally shaped tensors, accumulated in double.
template <typename Scalar>
double dot(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a, b, "dot");
  return a.vec().template cast<double>().dot(b.vec().template cast<double>());
}

template <typename Scalar>
double norm(const Tensor<Scalar>& a) {
  return a.vec().template cast<double>().norm();
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
  Index outer;
  Index extent;
  Index inner;
};

inline AxisSplit split_axis(const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace lorun
