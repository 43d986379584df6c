// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "mixlab/tensor.hpp"

namespace mixlab {

/// Counter-based random stream. The n-th draw is a pure function of
/// (seed, label, n), so a stream can be recreated anywhere and the result
/// does not depend on evaluation order. Streams with different labels are
/// keyed independently.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string label, std::uint64_t counter = 0);

  std::uint64_t seed() const noexcept { return seed_; }
  const std::string& label() const noexcept { return label_; }
  std::uint64_t counter() const noexcept { return counter_; }

  /// Draw at an absolute counter position without advancing.
  std::uint64_t at(std::uint64_t counter) const noexcept;

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller (consumes two draws).
  double normal() noexcept;
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept;

  /// Child stream labelled "<label>/<sub>", counter reset.
  RngStream derive(std::string_view sub) const;

 private:
  std::uint64_t seed_;
  std::string label_;
  std::uint64_t key_;
  std::uint64_t counter_;
};

std::uint64_t fnv1a64(std::string_view text) noexcept;

/// Tensor of {0,1} where each entry is 0 with probability swap_rate.
/// 0 marks an entry swapped to its reference value, 1 an entry kept.
Tensor bernoulli_mask(RngStream& stream, const Shape& shape, double swap_rate);

}  // namespace mixlab
