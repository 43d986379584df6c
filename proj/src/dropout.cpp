// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/dropout.hpp"

namespace mixlab {

namespace {

void check_rate(double rate, const char* what) {
  require(rate >= 0.0 && rate < 1.0, ErrorCode::invalid_argument,
          std::string(what) + " rate must lie in [0,1), got " + std::to_string(rate));
}

Tensor unit_mask(const Shape& shape, double rate, RngStream& stream) {
  Tensor mask(shape, DType::f64);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (auto& v : mask.data()) v = stream.uniform() < rate ? 0.0 : keep_scale;
  return mask;
}

Tensor channel_mask(const Shape& shape, double rate, RngStream& stream) {
  require(shape.size() == 4, ErrorCode::shape_mismatch, "dropfilter expects [B,C,H,W], got " + shape_str(shape));
  const std::size_t plane = shape[2] * shape[3];
  Tensor mask(shape, DType::f64);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t p = 0; p < shape[0] * shape[1]; ++p) {
    const double v = stream.uniform() < rate ? 0.0 : keep_scale;
    for (std::size_t i = 0; i < plane; ++i) mask[p * plane + i] = v;
  }
  return mask;
}

Tensor apply(const Tensor& x, const Tensor& mask) {
  Tensor y(x.shape(), x.dtype());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * mask[i];
  y.finalize("dropout");
  return y;
}

}  // namespace

Var dropout_forward(Var x, double rate, RngStream& stream, bool training) {
  check_rate(rate, "dropout");
  if (!training || rate == 0.0) return x;
  return mul_const(x, unit_mask(x.shape(), rate, stream));
}

Tensor dropout_forward(const Tensor& x, double rate, RngStream& stream, bool training) {
  check_rate(rate, "dropout");
  if (!training || rate == 0.0) return x;
  return apply(x, unit_mask(x.shape(), rate, stream));
}

Var dropfilter_forward(Var x, double rate, RngStream& stream, bool training) {
  check_rate(rate, "dropfilter");
  if (!training || rate == 0.0) return x;
  return mul_const(x, channel_mask(x.shape(), rate, stream));
}

Tensor dropfilter_forward(const Tensor& x, double rate, RngStream& stream, bool training) {
  check_rate(rate, "dropfilter");
  if (!training || rate == 0.0) return x;
  return apply(x, channel_mask(x.shape(), rate, stream));
}

}  // namespace mixlab
