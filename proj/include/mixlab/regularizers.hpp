// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "mixlab/dropout.hpp"
#include "mixlab/mixout.hpp"

namespace mixlab {

/// Swap rate used by Fixed Mixout when none is given.
inline constexpr double kFixedMixoutDefaultRate = 0.1;
inline constexpr std::size_t kDefaultLoraRank = 4;
inline constexpr std::size_t kDefaultEnsembleSize = 5;

/// coeff * sum ||theta - theta0||^2 over every parameter that has a reference.
double l2sp_penalty(const ParamStore& store, double coeff);
/// Closed form 2 coeff (theta - theta0) per referenced parameter.
TensorMap l2sp_gradient(const ParamStore& store, double coeff);

/// Equal-weight running mean of the trajectory from `start_step` on.
class MovingAverage {
 public:
  explicit MovingAverage(std::int64_t start_step = 0) : start_(start_step) {}

  /// Folds `store` into the average when step >= start_step.
  void update(const ParamStore& store, std::int64_t step);

  std::int64_t start_step() const noexcept { return start_; }
  std::size_t count() const noexcept { return count_; }
  bool empty() const noexcept { return count_ == 0; }
  const ParamStore& average() const;

 private:
  std::int64_t start_;
  std::size_t count_ = 0;
  ParamStore avg_;
};

/// avg <- avg + (theta - avg) / (n + 1) for every parameter; n is the number
/// of snapshots already folded in (n = 0 copies theta).
void ma_update(ParamStore& avg, const ParamStore& store, std::size_t n);

enum class LpftPhase { head_only, full };
LpftPhase lpft_schedule(std::int64_t step, std::int64_t boundary);

/// One draw at step 0, meant to be reused for every step.
MaskRealization fixed_mixout_masks(const MixoutConfig& config, const ParamStore& store, const RngStream& stream);

/// Mean logits over the members.
Tensor deep_ensemble_predict(std::span<const ParamStore> members, const ModelSpec& spec, const Tensor& x);

/// Entrywise mean of theta; theta0 and flags come from the first member.
ParamStore weight_average(std::span<const ParamStore> members);

/// Adds "<layer>.lora_A" [out,r] (zeros) and "<layer>.lora_B" [r,in]
/// (small uniform) for every dense body layer and freezes every non-head
/// parameter. The effective weight is W + A B.
ParamStore lora_wrap(const ParamStore& store, const ModelSpec& spec, std::size_t rank, RngStream stream);

/// Folds A B into each base weight and drops the adapters.
ParamStore lora_merge(const ParamStore& store);

/// r (out + in) for one dense [out,in] layer.
constexpr std::size_t lora_trainable_count(std::size_t out, std::size_t in, std::size_t rank) {
  return rank * (out + in);
}

/// Number of entries the optimizer may change.
std::size_t trainable_parameter_count(const ParamStore& store);

}  // namespace mixlab
