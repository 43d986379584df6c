// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mixlab/graph.hpp"

namespace mixlab {

/// Per-step compute profile of a backbone. The transformer fields are only
/// needed for LoRA accounting and are zero for convolutional profiles.
struct ArchProfile {
  std::string name;
  double forward_gflops = 0.0;
  double parameters = 0.0;
  std::size_t seq_len = 0;
  std::size_t hidden_dim = 0;
  std::size_t mlp_dim = 0;
  std::size_t blocks = 0;

  void validate() const;
};

ArchProfile resnet50_profile();
ArchProfile vit_s16_profile();
/// "resnet50" or "vit_s16".
ArchProfile builtin_profile(const std::string& name);

struct CostReport {
  std::string method;
  std::string profile;
  std::optional<double> swap_rate;
  std::optional<std::size_t> rank;
  std::optional<std::size_t> members;
  double fwd_gflops = 0.0;
  double bwd_gflops = 0.0;
  double total_gflops = 0.0;
  /// Training compute relative to plain fine-tuning.
  double cost_t_ratio = 1.0;
  /// Inference compute relative to one forward pass.
  double cost_i_ratio = 1.0;
  /// Stored weight gradients relative to plain fine-tuning.
  double grad_mem_fraction = 1.0;
  /// 1 - bwd / bwd(ERM).
  double backward_reduction = 0.0;
  /// LoRA only: extra forward and backward work of the adapters.
  double adapter_fwd_gflops = 0.0;
  double adapter_bwd_gflops = 0.0;
};

/// Forward F, backward 2F (weight and input gradients, F each).
CostReport erm_cost(const ArchProfile& profile);

/// Weight gradients are computed for the kept fraction only:
/// total = F (2 + (1 - s)).
CostReport mixout_cost(const ArchProfile& profile, double swap_rate);

/// M sequentially trained members. Output averaging runs M forwards at
/// inference; weight averaging runs one.
CostReport ensemble_cost(const ArchProfile& profile, std::size_t members, bool weight_averaged = false);

/// Rank-r adapters on every linear map of every transformer block.
CostReport lora_cost(const ArchProfile& profile, std::size_t rank);

/// Counter-based cross-check of a toy run against a plain fine-tuning run of
/// the same model and batch.
struct MeasuredCost {
  CostReport report;
  double weight_grad_ratio = 1.0;
  double input_grad_ratio = 1.0;
  double forward_ratio = 1.0;
};

MeasuredCost measured_flops(const MacCounters& baseline, const MacCounters& run, const std::string& method);

/// Cost table with a header row; optional columns are left empty.
std::string cost_csv(const std::vector<CostReport>& rows);

}  // namespace mixlab
