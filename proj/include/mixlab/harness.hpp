// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <exception>
#include <optional>
#include <string>
#include <vector>

#include "mixlab/config.hpp"
#include "mixlab/cost_model.hpp"

namespace mixlab {

inline constexpr const char* kVersion = "0.1.0";

/// One protocol run of the experiment. `swap_rate` is the grid point of a
/// sweep (the dropout rate for dropout methods) and empty for plain runs.
struct RunGroup {
  std::optional<double> swap_rate;
  ProtocolResult result;
};

struct HarnessResult {
  std::vector<RunGroup> groups;
  std::vector<CostReport> costs;
  /// Files written, relative to the output directory, sorted.
  std::vector<std::string> files;
};

/// Column names of results.csv in order.
const std::vector<std::string>& results_columns();

/// results.csv body, with run ids numbered across groups in order.
std::string results_csv(const std::vector<RunGroup>& groups);
/// One row per group: per-seed means then mean/stderr across seeds.
std::string summary_csv(const std::vector<RunGroup>& groups);
/// Validation accuracy of every candidate swap rate behind each run.
std::string selection_csv(const std::vector<RunGroup>& groups);

/// Analytic cost rows for both built-in profiles: the ERM baseline plus the
/// configured method at every rate it trains with.
std::vector<CostReport> experiment_costs(const ExperimentConfig& config, const std::vector<double>& rates);

/// Runs the leave-one-out protocol for every seed and writes results.csv,
/// summary.csv, selection.csv, costs.csv, config.resolved, manifest.json and
/// (when enabled) checkpoints/ into config.output_dir.
HarnessResult run_experiment(const ExperimentConfig& config);

/// Same, once per grid point. Mixout methods sweep the swap rate, dropout
/// methods the drop rate.
HarnessResult sweep_experiment(const ExperimentConfig& config, const std::vector<double>& grid);

/// 0 on success, 2 for configuration errors, 1 otherwise.
int exit_code_for(const std::exception& e);

/// JSON error record {"error", "message", "exit_code"} on one line.
std::string error_record(const std::exception& e);

/// Writes error_record(e) to <dir>/error.json; never throws.
void write_error_record(const std::string& dir, const std::exception& e);

/// RFC 4180 field quoting.
std::string csv_field(const std::string& s);

}  // namespace mixlab
