// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "mixlab/graph.hpp"
#include "mixlab/rng.hpp"

namespace mixlab {

/// Inverted dropout: during training each activation is zeroed with
/// probability `rate` and survivors are scaled by 1/(1-rate). Identity in
/// evaluation mode or at rate 0.
Var dropout_forward(Var x, double rate, RngStream& stream, bool training);
Tensor dropout_forward(const Tensor& x, double rate, RngStream& stream, bool training);

/// Channel dropout on [B,C,H,W]: one draw per (sample, channel); a dropped
/// channel is zero across all of H and W.
Var dropfilter_forward(Var x, double rate, RngStream& stream, bool training);
Tensor dropfilter_forward(const Tensor& x, double rate, RngStream& stream, bool training);

}  // namespace mixlab
