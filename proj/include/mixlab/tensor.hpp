// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mixlab/error.hpp"

namespace mixlab {

/// Storage precision. Values are always held as double; in f32 mode every
/// stored scalar is rounded to the nearest float so arithmetic results match
/// 32-bit storage.
enum class DType : std::uint8_t { f32, f64 };

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);
DType parse_dtype(const std::string& name);

inline double round_to(DType dtype, double v) {
  return dtype == DType::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::f32);
  Tensor(Shape shape, std::vector<double> data, DType dtype = DType::f32);

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor ones(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor scalar(double value, DType dtype = DType::f32);
  static Tensor from(std::initializer_list<double> values, DType dtype = DType::f32);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  DType dtype() const noexcept { return dtype_; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Value of a one-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  Tensor as(DType dtype) const;

  /// Re-rounds the buffer to the tensor dtype and throws non_finite if any
  /// entry is NaN or infinite. `what` names the producing operation.
  void finalize(const char* what);

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  std::vector<double> data_;
  DType dtype_ = DType::f32;
};

/// Exact elementwise equality (+0 and -0 compare equal). Shapes must match.
bool equal_exact(const Tensor& a, const Tensor& b);
/// Bitwise identity of the stored doubles, including shape and dtype.
bool identical(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& t);

void check_finite(std::span<const double> values, const char* what);

using TensorMap = std::map<std::string, Tensor>;

}  // namespace mixlab
