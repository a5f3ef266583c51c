#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "oudefend/errors.hpp"

namespace oudefend {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Row-major strides for `shape`, in elements.
inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

/// Dense row-major array of doubles.
///
/// Data is owned by value. `grad` is only populated by `Tape::backward` on
/// tensors that were registered as leaves with `requires_grad` set.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : shape_(std::move(shape)),
        data_(std::move(values)),
        requires_grad_(requires_grad) {
    if (numel(shape_) != data_.size()) {
      throw ShapeError("shape " + to_string(shape_) + " needs " +
                       std::to_string(numel(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    }
  }

  static Tensor zeros(Shape shape) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor full(Shape shape, double value) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor scalar(double value) { return Tensor({}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Multi-index element access; indices must be in range.
  double at(std::initializer_list<std::size_t> index) const {
    return data_[offset(index)];
  }
  double& at(std::initializer_list<std::size_t> index) {
    return data_[offset(index)];
  }

  /// Value of a single-element tensor.
  double item() const {
    if (data_.size() != 1) {
      throw ShapeError("item() on tensor of shape " + to_string(shape_));
    }
    return data_[0];
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool value) { requires_grad_ = value; }

  const std::optional<std::vector<double>>& grad() const { return grad_; }
  void set_grad(std::vector<double> grad) {
    if (grad.size() != data_.size()) {
      throw ShapeError("gradient length does not match tensor");
    }
    grad_ = std::move(grad);
  }
  void clear_grad() { grad_.reset(); }

  /// Copy with a new shape of equal element count.
  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " +
                       to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) {
      throw AxisError("index rank " + std::to_string(index.size()) +
                      " for tensor of rank " + std::to_string(shape_.size()));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : index) {
      if (i >= shape_[axis]) throw AxisError("index out of range");
      off = off * shape_[axis] + i;
      ++axis;
    }
    return off;
  }

  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

/// Validated construction: `values` must fill `shape` exactly.
inline Tensor build_tensor(Shape shape, std::vector<double> values,
                           bool requires_grad = false) {
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

inline Tensor zeros_like(const Tensor& t) { return Tensor::zeros(t.shape()); }

}  // namespace oudefend
