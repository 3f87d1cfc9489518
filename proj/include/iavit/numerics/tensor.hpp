// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace iavit {

/// Raised when operand shapes are incompatible. The message carries both shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a non-finite value crosses an operation boundary.
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

/// Dense row-major array with an optional gradient slot.
///
/// `grad` is empty until a backward pass (or an optimizer) allocates it; when
/// present it always has the same length as `data`.
template <typename Real>
struct BasicTensor {
  using value_type = Real;

  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;

  BasicTensor() = default;

  explicit BasicTensor(Shape s, Real fill = Real(0)) : shape(std::move(s)), data(numel(shape), fill) {
    validate_extents();
  }

  BasicTensor(Shape s, std::vector<Real> values) : shape(std::move(s)), data(std::move(values)) {
    validate_extents();
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + to_string(shape) + " holds " + std::to_string(numel(shape)) +
                           " values but " + std::to_string(data.size()) + " were given");
    }
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }
  bool has_grad() const { return !grad.empty(); }

  Real& operator[](std::size_t i) { return data[i]; }
  const Real& operator[](std::size_t i) const { return data[i]; }

  Real& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  const Real& at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  void zero_grad() {
    if (requires_grad) grad.assign(data.size(), Real(0));
    else grad.clear();
  }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
  }

  /// Converts element type, dropping any gradient.
  template <typename Other>
  BasicTensor<Other> cast() const {
    BasicTensor<Other> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

 private:
  void validate_extents() const {
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
    }
  }
};

using Tensor = BasicTensor<float>;

/// Shared handle used by the autodiff graph. Parameters and intermediates are both Vars.
template <typename Real>
using BasicVar = std::shared_ptr<BasicTensor<Real>>;
using Var = BasicVar<float>;

template <typename Real>
BasicVar<Real> constant(BasicTensor<Real> t) {
  t.requires_grad = false;
  t.grad.clear();
  return std::make_shared<BasicTensor<Real>>(std::move(t));
}

template <typename Real>
BasicVar<Real> parameter(BasicTensor<Real> t) {
  t.requires_grad = true;
  return std::make_shared<BasicTensor<Real>>(std::move(t));
}

template <typename Real>
void check_finite(const BasicTensor<Real>& t, std::string_view where) {
  // Branch-free scan first (vectorizes); locate the offender only on failure.
  bool bad = false;
  for (Real v : t.data) bad |= !(v - v == Real(0));
  if (!bad) return;
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    if (!std::isfinite(t.data[i])) {
      throw NumericError(std::string(where) + ": non-finite value " + std::to_string(t.data[i]) + " at flat index " +
                         std::to_string(i) + " of tensor " + to_string(t.shape));
    }
  }
}

}  // namespace iavit
