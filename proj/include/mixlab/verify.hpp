// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

namespace mixlab {

struct VerifyCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyReport {
  std::vector<VerifyCheck> checks;
  bool passed() const;
};

/// Built-in invariant checks on small instances: cost arithmetic, masked
/// gradients against finite differences, the swap-rate limits, mask
/// structure, the scaling identity, baselines and checkpoint round trips.
/// `on_check` sees each result as it completes.
VerifyReport run_verify(const std::function<void(const VerifyCheck&)>& on_check = {});

}  // namespace mixlab
