// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mixlab/protocol.hpp"

namespace mixlab {

/// Results table layout version, written to manifest.json.
inline constexpr int kResultsSchemaVersion = 1;

struct DiagnosticsConfig {
  bool enabled = true;
  std::vector<std::int64_t> mc_ks{1, 2, 4, 8, 16, 32, 64};
};

/// A fully resolved experiment. Every field has a value after parsing.
struct ExperimentConfig {
  std::string benchmark;
  std::string method;
  std::vector<std::uint64_t> seeds;
  std::string output_dir = "mixlab_out";
  std::uint64_t global_seed = 0;
  /// 0 means MIXLAB_THREADS or the hardware concurrency.
  std::size_t threads = 0;
  bool timing = false;
  bool save_checkpoints = true;
  /// Rank used for the analytic LoRA cost rows.
  std::size_t cost_lora_rank = 64;

  Benchmark bench;
  MethodConfig method_config;
  DiagnosticsConfig diagnostics;

  std::size_t effective_threads() const;
};

/// Parses key = value lines grouped under [section] headers. Keys before the
/// first header belong to [experiment]. `origin` names the source in error
/// messages ("<origin>:<line>: ..."). MIXLAB_SEED, when set, overrides
/// global_seed.
ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig parse_config(const std::string& path);

/// Canonical form listing every key; parsing it yields the same config and
/// the same text.
std::string resolved_config_text(const ExperimentConfig& config);

/// "a:b:step" (inclusive) or a comma-separated list.
std::vector<double> parse_grid(const std::string& text);

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

}  // namespace mixlab
