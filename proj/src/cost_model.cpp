// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/cost_model.hpp"

#include <cstdio>

#include "mixlab/error.hpp"

namespace mixlab {

void ArchProfile::validate() const {
  require(forward_gflops > 0.0, ErrorCode::invalid_argument, "profile '" + name + "': forward GFLOPs must be > 0");
}

ArchProfile resnet50_profile() { return {"resnet50", 4.1, 25.6e6, 0, 0, 0, 0}; }

ArchProfile vit_s16_profile() { return {"vit_s16", 4.6, 22.1e6, 196, 384, 1536, 12}; }

ArchProfile builtin_profile(const std::string& name) {
  if (name == "resnet50") return resnet50_profile();
  if (name == "vit_s16") return vit_s16_profile();
  fail(ErrorCode::invalid_argument, "unknown profile '" + name + "' (expected resnet50 or vit_s16)");
}

namespace {

CostReport base(const ArchProfile& p, const char* method) {
  p.validate();
  CostReport r;
  r.method = method;
  r.profile = p.name;
  return r;
}

void finish(CostReport& r, const ArchProfile& p) {
  const double erm_total = 3.0 * p.forward_gflops;
  const double erm_bwd = 2.0 * p.forward_gflops;
  r.total_gflops = r.fwd_gflops + r.bwd_gflops;
  r.cost_t_ratio = r.total_gflops / erm_total;
  r.backward_reduction = 1.0 - r.bwd_gflops / erm_bwd;
}

}  // namespace

CostReport erm_cost(const ArchProfile& profile) {
  CostReport r = base(profile, "erm");
  r.fwd_gflops = profile.forward_gflops;
  r.bwd_gflops = 2.0 * profile.forward_gflops;
  finish(r, profile);
  return r;
}

CostReport mixout_cost(const ArchProfile& profile, double swap_rate) {
  require(swap_rate >= 0.0 && swap_rate <= 1.0, ErrorCode::invalid_argument, "swap_rate must lie in [0,1]");
  CostReport r = base(profile, "mixout");
  r.swap_rate = swap_rate;
  const double kept = 1.0 - swap_rate;
  r.fwd_gflops = profile.forward_gflops;
  // Input gradients always cost F; weight gradients only for kept entries.
  r.bwd_gflops = profile.forward_gflops * (1.0 + kept);
  r.grad_mem_fraction = kept;
  finish(r, profile);
  return r;
}

CostReport ensemble_cost(const ArchProfile& profile, std::size_t members, bool weight_averaged) {
  require(members >= 1, ErrorCode::invalid_argument, "an ensemble needs at least one member");
  CostReport r = base(profile, weight_averaged ? "diwa" : "ensemble");
  r.members = members;
  const double m = static_cast<double>(members);
  r.fwd_gflops = m * profile.forward_gflops;
  r.bwd_gflops = m * 2.0 * profile.forward_gflops;
  r.cost_i_ratio = weight_averaged ? 1.0 : m;
  finish(r, profile);
  return r;
}

CostReport lora_cost(const ArchProfile& profile, std::size_t rank) {
  require(profile.blocks > 0 && profile.hidden_dim > 0 && profile.seq_len > 0, ErrorCode::invalid_argument,
          "profile '" + profile.name + "' has no transformer dimensions for LoRA accounting");
  require(rank >= 1 && rank < profile.hidden_dim, ErrorCode::invalid_argument,
          "LoRA rank must lie in [1, " + std::to_string(profile.hidden_dim) + ")");
  CostReport r = base(profile, "lora");
  r.rank = rank;
  const double n = static_cast<double>(profile.seq_len), d = static_cast<double>(profile.hidden_dim);
  const double m = static_cast<double>(profile.mlp_dim), rr = static_cast<double>(rank);
  const double blocks = static_cast<double>(profile.blocks);
  // Four attention maps D->D and the two MLP maps D->4D, 4D->D.
  const double per_token = 4.0 * (d * rr + rr * d) + 2.0 * (d * rr + rr * m);
  r.adapter_fwd_gflops = blocks * n * per_token * 1e-9;
  r.adapter_bwd_gflops = 2.0 * r.adapter_fwd_gflops;
  const double f = profile.forward_gflops;
  r.fwd_gflops = f + r.adapter_fwd_gflops;
  // The frozen base drops its weight gradients: 2F - F, plus the adapters'
  // backward work.
  const double total = 2.0 * f - f + r.adapter_bwd_gflops;
  r.bwd_gflops = total - r.fwd_gflops;
  const double adapter_params = blocks * (4.0 * rr * (d + d) + rr * (d + m) + rr * (m + d));
  r.grad_mem_fraction = profile.parameters > 0.0 ? adapter_params / profile.parameters : 0.0;
  finish(r, profile);
  return r;
}

MeasuredCost measured_flops(const MacCounters& baseline, const MacCounters& run, const std::string& method) {
  require(baseline.forward > 0 && baseline.weight_grad > 0, ErrorCode::invalid_argument,
          "baseline counters are empty");
  auto ratio = [](std::uint64_t a, std::uint64_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / b; };
  MeasuredCost m;
  m.forward_ratio = ratio(run.forward, baseline.forward);
  m.weight_grad_ratio = ratio(run.weight_grad, baseline.weight_grad);
  m.input_grad_ratio = ratio(run.input_grad, baseline.input_grad);
  CostReport& r = m.report;
  r.method = method;
  r.profile = "measured";
  r.fwd_gflops = static_cast<double>(run.forward) * 1e-9;
  r.bwd_gflops = static_cast<double>(run.input_grad + run.weight_grad) * 1e-9;
  r.total_gflops = r.fwd_gflops + r.bwd_gflops;
  const double base_total = static_cast<double>(baseline.forward + baseline.input_grad + baseline.weight_grad);
  const double base_bwd = static_cast<double>(baseline.input_grad + baseline.weight_grad);
  r.cost_t_ratio = static_cast<double>(run.forward + run.input_grad + run.weight_grad) / base_total;
  r.backward_reduction = 1.0 - static_cast<double>(run.input_grad + run.weight_grad) / base_bwd;
  r.grad_mem_fraction = m.weight_grad_ratio;
  return m;
}

std::string cost_csv(const std::vector<CostReport>& rows) {
  std::string out =
      "method,profile,swap_rate,rank,members,fwd_gflops,bwd_gflops,total_gflops,cost_t_ratio,cost_i_ratio,"
      "grad_mem_fraction\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    out += r.method + "," + r.profile + ",";
    out += (r.swap_rate ? num(*r.swap_rate) : "") + ",";
    out += (r.rank ? std::to_string(*r.rank) : "") + ",";
    out += (r.members ? std::to_string(*r.members) : "") + ",";
    out += num(r.fwd_gflops) + "," + num(r.bwd_gflops) + "," + num(r.total_gflops) + "," + num(r.cost_t_ratio) +
           "," + num(r.cost_i_ratio) + "," + num(r.grad_mem_fraction) + "\n";
  }
  return out;
}

}  // namespace mixlab
