// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <string>
#include <vector>

#include "mixlab/graph.hpp"
#include "mixlab/model.hpp"

namespace mixlab {

enum class OptimizerKind { adam, sgd };

const char* to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Coupled L2 term added to the gradient.
  double weight_decay = 0.0;
};

/// Per-entry update gates keyed by parameter name (1 = update, 0 = skip).
using UpdateMasks = std::map<std::string, GateMask>;

/// Adam or SGD over a ParamStore. Gated entries are skipped entirely: their
/// value, moments and per-entry step count stay as they were, so a swapped
/// coordinate is not moved by stale momentum. theta0 is never written.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {});

  const OptimizerConfig& config() const noexcept { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

  void step(ParamStore& store, const TensorMap& grads, const UpdateMasks* masks = nullptr);

 private:
  struct Slot {
    std::vector<double> m;
    std::vector<double> v;
    std::vector<std::uint32_t> t;
  };

  OptimizerConfig config_;
  std::map<std::string, Slot> slots_;
};

}  // namespace mixlab
