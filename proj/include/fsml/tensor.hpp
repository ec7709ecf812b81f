#pragma once

#include <cstddef>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "fsml/error.hpp"

namespace fsml {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_str(const Shape& shape);

/// Dense row-major array. Training paths use Tensor<float>; oracle and
/// gradient-check paths use Tensor<double>.
template <class Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_extents();
  }
  Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(Real v) { return Tensor(Shape{1}, std::vector<Real>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  std::vector<Real>& storage() noexcept { return data_; }
  const std::vector<Real>& storage() const noexcept { return data_; }

  Real& operator[](std::size_t i) noexcept { return data_[i]; }
  Real operator[](std::size_t i) const noexcept { return data_[i]; }

  Real item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <class To>
  Tensor<To> cast() const {
    std::vector<To> out(data_.begin(), data_.end());
    return Tensor<To>(shape_, std::move(out));
  }

  bool all_finite() const noexcept;

 private:
  void check_extents() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<Real> data_;
};

/// Shape equality plus byte-for-byte equality of the data.
template <class Real>
bool bitwise_equal(const Tensor<Real>& a, const Tensor<Real>& b) noexcept {
  return a.shape() == b.shape() &&
         (a.numel() == 0 ||
          std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(Real)) == 0);
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace fsml
