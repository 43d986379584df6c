// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <mutex>
#include <set>

#include <json.hpp>

#include "mixlab/checkpoint.hpp"

namespace mixlab {

namespace fs = std::filesystem;

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

const std::vector<std::string>& results_columns() {
  static const std::vector<std::string> cols{
      "run_id",    "benchmark",      "method",     "swap_rate",        "granularity",
      "scaling_mode", "seed",        "held_out_domain", "step_count", "in_acc",
      "ood_acc",   "theta_dist",     "disagreement_in", "disagreement_ood", "wall_ms"};
  return cols;
}

namespace {

std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

std::string row(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) out += (i ? "," : "") + csv_field(fields[i]);
  return out + "\n";
}

double mean_of(const std::vector<RunRecord>& records, const std::function<std::optional<double>(const RunRecord&)>& f,
               std::size_t* n = nullptr) {
  double s = 0.0;
  std::size_t count = 0;
  for (const auto& r : records)
    if (auto v = f(r)) {
      s += *v;
      ++count;
    }
  if (n) *n = count;
  return count ? s / static_cast<double>(count) : 0.0;
}

// The group's rate, or the rate every run shares when none was imposed.
std::optional<double> group_rate(const RunGroup& g) {
  if (g.swap_rate || g.result.records.empty()) return g.swap_rate;
  const auto first = g.result.records.front().swap_rate;
  for (const auto& r : g.result.records)
    if (r.swap_rate != first) return std::nullopt;
  return first;
}

}  // namespace

std::string results_csv(const std::vector<RunGroup>& groups) {
  std::string out = row(results_columns());
  std::size_t id = 0;
  for (const auto& g : groups)
    for (const auto& r : g.result.records)
      out += row({std::to_string(id++), r.benchmark, r.method, opt(r.swap_rate), r.granularity, r.scaling_mode,
                  std::to_string(r.seed), std::to_string(r.held_out_domain), std::to_string(r.step_count),
                  format_double(r.in_acc), format_double(r.ood_acc), format_double(r.theta_dist),
                  opt(r.disagreement_in), opt(r.disagreement_ood), format_double(r.wall_ms)});
  return out;
}

std::string summary_csv(const std::vector<RunGroup>& groups) {
  std::string out = row({"benchmark", "method", "swap_rate", "seeds", "in_acc_mean", "in_acc_stderr", "ood_acc_mean",
                         "ood_acc_stderr", "theta_dist_mean", "disagreement_in_mean", "disagreement_ood_mean"});
  for (const auto& g : groups) {
    const auto& recs = g.result.records;
    const Summary in = g.result.in_domain();
    const Summary ood = g.result.ood();
    std::size_t nd = 0;
    const double din = mean_of(recs, [](const RunRecord& r) { return r.disagreement_in; }, &nd);
    const double dood = mean_of(recs, [](const RunRecord& r) { return r.disagreement_ood; });
    out += row({g.result.benchmark, g.result.method, opt(group_rate(g)), std::to_string(in.n), format_double(in.mean),
                format_double(in.stderr_), format_double(ood.mean), format_double(ood.stderr_),
                format_double(mean_of(recs, [](const RunRecord& r) { return std::optional<double>(r.theta_dist); })),
                nd ? format_double(din) : "", nd ? format_double(dood) : ""});
  }
  return out;
}

std::string selection_csv(const std::vector<RunGroup>& groups) {
  std::string out = row({"run_id", "candidate_swap_rate", "val_acc", "selected"});
  std::size_t id = 0;
  for (const auto& g : groups)
    for (const auto& r : g.result.records) {
      for (const auto& [s, acc] : r.selection)
        out += row({std::to_string(id), format_double(s), format_double(acc),
                    r.swap_rate && *r.swap_rate == s ? "1" : "0"});
      ++id;
    }
  return out;
}

std::vector<CostReport> experiment_costs(const ExperimentConfig& config, const std::vector<double>& rates) {
  const MethodConfig& m = config.method_config;
  std::vector<CostReport> rows;
  for (const char* name : {"resnet50", "vit_s16"}) {
    const ArchProfile p = builtin_profile(name);
    rows.push_back(erm_cost(p));
    std::set<double> seen;
    for (double s : rates)
      if (seen.insert(s).second) rows.push_back(mixout_cost(p, s));
    if (m.ensemble) rows.push_back(ensemble_cost(p, m.members, false));
    if (m.diwa) rows.push_back(ensemble_cost(p, m.members, true));
    if (p.blocks > 0 && config.cost_lora_rank < p.hidden_dim) rows.push_back(lora_cost(p, config.cost_lora_rank));
  }
  return rows;
}

namespace {

std::string manifest_json(const ExperimentConfig& config, const HarnessResult& h) {
  nlohmann::ordered_json j;
  j["schema_version"] = kResultsSchemaVersion;
  j["tool"] = "mixlab";
  j["version"] = kVersion;
  j["benchmark"] = config.benchmark;
  j["method"] = config.method;
  j["global_seed"] = config.global_seed;
  j["seeds"] = config.seeds;
  std::size_t runs = 0;
  for (const auto& g : h.groups) runs += g.result.records.size();
  j["runs"] = runs;
  j["columns"] = results_columns();
  j["files"] = h.files;
  return j.dump(2) + "\n";
}

// Rate-specific copy of the method for one sweep point.
MethodConfig at_rate(const MethodConfig& base, double s) {
  MethodConfig m = base;
  if (m.uses_swap_rate()) {
    m.swap_rate_grid = {s};
    m.mixout_config.swap_rate = s;
    // Everything is swapped at s = 1, so the corrected forward reduces to theta0.
    if (s == 1.0 && m.mixout_config.scaling_mode == ScalingMode::train_corrected)
      m.mixout_config.scaling_mode = ScalingMode::raw;
  } else if (m.dropout || m.dropfilter) {
    require(s < 1.0, ErrorCode::config, "dropout rate must be below 1, got " + format_double(s));
    m.dropout_rate = s;
  } else {
    fail(ErrorCode::config, "method '" + m.name + "' has no rate to sweep");
  }
  return m;
}

HarnessResult execute(const ExperimentConfig& config, const std::vector<std::pair<std::optional<double>, MethodConfig>>& plan) {
  const fs::path dir(config.output_dir);
  fs::create_directories(dir);
  fs::remove(dir / "error.json");
  if (config.save_checkpoints) {
    fs::remove_all(dir / "checkpoints");
    fs::create_directories(dir / "checkpoints");
  }

  HarnessResult h;
  PretrainCache cache;
  std::mutex mu;
  std::size_t offset = 0;
  std::vector<double> rates;
  for (const auto& [rate, method] : plan) {
    ProtocolOptions opts;
    opts.global_seed = config.global_seed;
    opts.threads = config.effective_threads();
    opts.timing = config.timing;
    opts.cache = &cache;
    if (config.save_checkpoints)
      opts.on_run = [&, offset](std::size_t i, const FineTuneResult& ft) {
        char name[32];
        std::snprintf(name, sizeof name, "run_%04zu", offset + i);
        std::vector<std::string> written;
        const std::uint64_t step = ft.record.step_count;
        if (ft.members.empty() || method.diwa) {
          const std::string rel = std::string("checkpoints/") + name + ".ckpt";
          save_checkpoint(ft.store, ft.model, (dir / rel).string(), ft.record.seed, step);
          written.push_back(rel);
        }
        for (std::size_t m = 0; m < ft.members.size(); ++m) {
          const std::string rel = std::string("checkpoints/") + name + ".m" + std::to_string(m) + ".ckpt";
          save_checkpoint(ft.members[m], ft.model, (dir / rel).string(), ft.record.seed, step);
          written.push_back(rel);
        }
        std::lock_guard lock(mu);
        h.files.insert(h.files.end(), written.begin(), written.end());
      };
    RunGroup g{rate, run_protocol(config.bench, method, config.seeds, opts)};
    offset += g.result.records.size();
    for (double s : method.candidate_rates()) rates.push_back(s);
    h.groups.push_back(std::move(g));
  }

  if (!config.method_config.uses_swap_rate()) rates = {config.method_config.mixout_config.swap_rate};
  h.costs = experiment_costs(config, rates);
  write_file_atomic((dir / "results.csv").string(), results_csv(h.groups));
  write_file_atomic((dir / "summary.csv").string(), summary_csv(h.groups));
  write_file_atomic((dir / "selection.csv").string(), selection_csv(h.groups));
  write_file_atomic((dir / "costs.csv").string(), cost_csv(h.costs));
  write_file_atomic((dir / "config.resolved").string(), resolved_config_text(config));
  for (const char* f : {"results.csv", "summary.csv", "selection.csv", "costs.csv", "config.resolved", "manifest.json"})
    h.files.emplace_back(f);
  std::sort(h.files.begin(), h.files.end());
  write_file_atomic((dir / "manifest.json").string(), manifest_json(config, h));
  return h;
}

}  // namespace

HarnessResult run_experiment(const ExperimentConfig& config) {
  return execute(config, {{std::nullopt, config.method_config}});
}

HarnessResult sweep_experiment(const ExperimentConfig& config, const std::vector<double>& grid) {
  require(!grid.empty(), ErrorCode::config, "sweep grid is empty");
  std::vector<std::pair<std::optional<double>, MethodConfig>> plan;
  for (double s : grid) {
    require(s >= 0.0 && s <= 1.0, ErrorCode::config, "grid point " + format_double(s) + " lies outside [0,1]");
    plan.emplace_back(s, at_rate(config.method_config, s));
  }
  return execute(config, plan);
}

int exit_code_for(const std::exception& e) {
  if (const auto* m = dynamic_cast<const MixlabError*>(&e)) return m->code() == ErrorCode::config ? 2 : 1;
  return 1;
}

std::string error_record(const std::exception& e) {
  nlohmann::ordered_json j;
  const auto* m = dynamic_cast<const MixlabError*>(&e);
  j["error"] = m ? error_code_name(m->code()) : "internal";
  j["message"] = e.what();
  j["exit_code"] = exit_code_for(e);
  return j.dump();
}

void write_error_record(const std::string& dir, const std::exception& e) {
  try {
    fs::create_directories(dir);
    write_file_atomic((fs::path(dir) / "error.json").string(), error_record(e) + "\n");
  } catch (...) {
  }
}

}  // namespace mixlab
