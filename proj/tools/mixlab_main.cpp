// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mixlab/mixlab.h"

namespace {

// Machine-readable record for failures that happen before an output
// directory is known.
int report(mixlab_status status) {
  std::string msg = mixlab_last_error();
  std::string escaped;
  for (char c : msg) {
    if (c == '"' || c == '\\') escaped += '\\';
    if (c == '\n') {
      escaped += "\\n";
      continue;
    }
    escaped += c;
  }
  std::fprintf(stderr, "{\"error\":\"%s\",\"message\":\"%s\",\"exit_code\":%d}\n", mixlab_status_name(status),
               escaped.c_str(), mixlab_exit_code(status));
  return mixlab_exit_code(status);
}

int run_or_sweep(const std::string& path, const std::string* grid, const std::string& out_dir) {
  mixlab_config* cfg = nullptr;
  mixlab_status st = mixlab_config_load(path.c_str(), &cfg);
  if (st != MIXLAB_OK) return report(st);
  if (!out_dir.empty()) mixlab_config_set_output_dir(cfg, out_dir.c_str());
  st = grid ? mixlab_sweep(cfg, grid->c_str()) : mixlab_run(cfg);
  mixlab_config_free(cfg);
  return st == MIXLAB_OK ? 0 : report(st);
}

void print_check(const char* name, int passed, const char* detail, void*) {
  std::printf("%-28s %s  %s\n", name, passed ? "PASS" : "FAIL", detail);
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixlab: stochastic parameter swapping for fine-tuning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(mixlab_version()));

  std::string config_path, out_dir, grid;
  auto* run = app.add_subcommand("run", "Run the leave-one-out protocol for a config");
  run->add_option("config", config_path, "Experiment config file")->required();
  run->add_option("-o,--output", out_dir, "Override output_dir");

  auto* sweep = app.add_subcommand("sweep", "Run the protocol once per swap rate");
  sweep->add_option("config", config_path, "Experiment config file")->required();
  sweep->add_option("--grid", grid, "start:stop:step or a comma-separated list")->required();
  sweep->add_option("-o,--output", out_dir, "Override output_dir");

  std::string profile = "vit_s16", method = "mixout";
  double swap_rate = 0.9;
  std::size_t rank = 64, members = 5;
  auto* cost = app.add_subcommand("cost", "Analytic training and inference cost");
  cost->add_option("--profile", profile, "resnet50 or vit_s16")->capture_default_str();
  cost->add_option("--method", method, "erm, mixout, fixed_mixout, ensemble, diwa or lora")->capture_default_str();
  cost->add_option("--swap-rate", swap_rate, "Swap rate for Mixout")->capture_default_str();
  cost->add_option("--rank", rank, "LoRA rank")->capture_default_str();
  cost->add_option("--members", members, "Ensemble size")->capture_default_str();

  auto* verify = app.add_subcommand("verify", "Run the built-in invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*run) return run_or_sweep(config_path, nullptr, out_dir);
  if (*sweep) return run_or_sweep(config_path, &grid, out_dir);
  if (*cost) {
    mixlab_cost_report r{};
    const mixlab_status st = mixlab_cost(profile.c_str(), method.c_str(), swap_rate, rank, members, &r);
    if (st != MIXLAB_OK) return report(st);
    std::printf("profile            %s\n", profile.c_str());
    std::printf("method             %s\n", method.c_str());
    std::printf("forward_gflops     %.4f\n", r.fwd_gflops);
    std::printf("backward_gflops    %.4f\n", r.bwd_gflops);
    std::printf("total_gflops       %.4f\n", r.total_gflops);
    std::printf("cost_t             %.4f\n", r.cost_t_ratio);
    std::printf("cost_i             %.4f\n", r.cost_i_ratio);
    std::printf("backward_reduction %.4f\n", r.backward_reduction);
    std::printf("grad_memory        %.4f\n", r.grad_mem_fraction);
    if (r.adapter_fwd_gflops > 0.0) {
      std::printf("adapter_fwd_gflops %.4f\n", r.adapter_fwd_gflops);
      std::printf("adapter_bwd_gflops %.4f\n", r.adapter_bwd_gflops);
    }
    return 0;
  }
  if (*verify) {
    int ok = 0;
    const mixlab_status st = mixlab_verify(print_check, nullptr, &ok);
    if (st != MIXLAB_OK) return report(st);
    std::printf("%s\n", ok ? "all checks passed" : "some checks failed");
    return ok ? 0 : 1;
  }
  return 0;
}
