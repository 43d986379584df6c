// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "mixlab/domain_bench.hpp"
#include "mixlab/regularizers.hpp"

namespace mixlab {

/// A training method. `name` is the user-facing tag ("erm", "mixout",
/// "mixout+ma", ...); the flags below are what the trainer acts on.
struct MethodConfig {
  std::string name = "erm";
  bool mixout = false;
  bool fixed_mixout = false;
  bool dropout = false;
  bool dropfilter = false;
  bool l2sp = false;
  bool ma = false;
  bool lpft = false;
  bool lora = false;
  bool ensemble = false;
  bool diwa = false;

  MixoutConfig mixout_config;
  /// Candidate swap rates; when it has more than one entry the rate is
  /// selected per run by in-domain validation accuracy.
  std::vector<double> swap_rate_grid;
  double dropout_rate = 0.1;
  double l2sp_coeff = 0.01;
  double ma_start_fraction = 0.5;
  double lpft_fraction = 0.5;
  std::size_t lora_rank = kDefaultLoraRank;
  std::size_t members = kDefaultEnsembleSize;

  bool uses_swap_rate() const noexcept { return mixout || fixed_mixout; }
  /// Swap rates this method trains at (one entry for non-Mixout methods).
  std::vector<double> candidate_rates() const;
  void validate() const;
};

/// "erm", "mixout", "dropout", "dropfilter", "ensemble", "diwa", "lora",
/// "fixed_mixout", "lpft", "l2sp", "ma", or "mixout+X" for X in ma, l2sp,
/// lpft, dropout, dropfilter.
MethodConfig parse_method(const std::string& name);
const std::vector<std::string>& known_methods();

enum class CheckpointSelection { last, best_val };
const char* to_string(CheckpointSelection s);
CheckpointSelection parse_checkpoint_selection(const std::string& s);

struct TrainConfig {
  std::size_t steps = 200;
  std::size_t batch_per_domain = 16;
  OptimizerConfig optimizer{OptimizerKind::adam, 3e-3};
  double val_fraction = 0.2;
  CheckpointSelection selection = CheckpointSelection::last;
  std::size_t eval_every = 50;
  /// Rows of each evaluation split used for the disagreement diagnostic.
  std::size_t diag_samples = 200;
  std::size_t disagreement_pairs = 50;
  bool diagnostics = true;
};

struct Benchmark {
  std::string name;
  DomainSpec domains;
  ModelSpec model;
  PretrainConfig pretrain;
  TrainConfig train;
};

/// Built-in benchmarks named after their generator.
Benchmark builtin_benchmark(const std::string& name);
const std::vector<std::string>& builtin_benchmark_names();

struct RunRecord {
  std::string benchmark;
  std::string method;
  std::optional<double> swap_rate;
  std::string granularity;
  std::string scaling_mode;
  std::uint64_t seed = 0;
  int held_out_domain = 0;
  std::size_t step_count = 0;
  double in_acc = 0.0;
  double ood_acc = 0.0;
  double theta_dist = 0.0;
  std::optional<double> disagreement_in;
  std::optional<double> disagreement_ood;
  double wall_ms = 0.0;
  /// Validation accuracy of every candidate swap rate, in grid order.
  std::vector<std::pair<double, double>> selection;
};

struct Summary {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t n = 0;
};

Summary summarize(const std::vector<double>& values);

struct ProtocolResult {
  std::string benchmark;
  std::string method;
  /// Ordered by (seed, held-out domain).
  std::vector<RunRecord> records;

  /// Per-seed mean OOD accuracy over held-out domains, then mean/stderr
  /// across seeds.
  Summary ood() const;
  Summary in_domain() const;
  /// Mean OOD accuracy per held-out domain.
  std::map<int, double> per_domain_ood() const;
};

/// Pretrained reference models keyed by (benchmark, seed), built at most
/// once and shared by every method run on the same seed.
class PretrainCache {
 public:
  std::shared_ptr<const PretrainResult> get(const Benchmark& bench, std::uint64_t seed, std::uint64_t global_seed);

 private:
  std::mutex mu_;
  std::map<std::string, std::shared_future<std::shared_ptr<const PretrainResult>>> entries_;
};

struct FineTuneResult;

struct ProtocolOptions {
  std::uint64_t global_seed = 0;
  std::size_t threads = 1;
  bool timing = false;
  PretrainCache* cache = nullptr;
  /// Restrict to these held-out domains (all when empty).
  std::vector<int> held_out;
  /// Called once per finished run with the record index and the selected
  /// artifacts. May run on a worker thread.
  std::function<void(std::size_t, const FineTuneResult&)> on_run;
};

/// The trained artifacts of one (seed, held-out domain, swap rate) run.
struct FineTuneResult {
  RunRecord record;
  ParamStore store;
  std::vector<ParamStore> members;
  /// Mixout settings the run trained with (Mixout methods only).
  std::optional<MixoutConfig> mixout;
  ModelSpec model;
  double val_acc = 0.0;
};

/// Data of one seed: every domain, split into train/validation parts.
struct SeedData {
  std::vector<Dataset> train;
  std::vector<Dataset> val;
  std::vector<Dataset> full;
};

SeedData make_seed_data(const Benchmark& bench, std::uint64_t seed, std::uint64_t global_seed);

/// Fine-tunes the pretrained model on every domain except `held_out` at
/// one swap rate (ignored by non-Mixout methods) and evaluates it.
FineTuneResult fine_tune(const Benchmark& bench, const MethodConfig& method, const PretrainResult& pretrained,
                         const SeedData& data, std::uint64_t seed, std::uint64_t global_seed, int held_out,
                         double swap_rate, bool timing = false);

/// Leave-one-out over every domain for every seed.
ProtocolResult run_protocol(const Benchmark& bench, const MethodConfig& method, const std::vector<std::uint64_t>& seeds,
                            const ProtocolOptions& options = {});

/// Runs fn(0..n-1) on up to `threads` workers; rethrows the first failure in
/// index order.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// MIXLAB_THREADS when set, otherwise the hardware concurrency.
std::size_t default_threads();

}  // namespace mixlab
