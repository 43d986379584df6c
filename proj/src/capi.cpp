// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/mixlab.h"

#include <cstring>
#include <new>
#include <string>

#include "mixlab/checkpoint.hpp"
#include "mixlab/harness.hpp"
#include "mixlab/verify.hpp"

struct mixlab_config {
  mixlab::ExperimentConfig config;
};

struct mixlab_model {
  mixlab::Checkpoint checkpoint;
};

namespace {

thread_local std::string last_error;

mixlab_status status_of(mixlab::ErrorCode code) {
  using mixlab::ErrorCode;
  switch (code) {
    case ErrorCode::invalid_argument: return MIXLAB_ERR_INVALID_ARGUMENT;
    case ErrorCode::shape_mismatch: return MIXLAB_ERR_SHAPE;
    case ErrorCode::non_finite: return MIXLAB_ERR_NON_FINITE;
    case ErrorCode::format: return MIXLAB_ERR_FORMAT;
    case ErrorCode::io: return MIXLAB_ERR_IO;
    case ErrorCode::config: return MIXLAB_ERR_CONFIG;
    case ErrorCode::state: return MIXLAB_ERR_STATE;
    case ErrorCode::divergence: return MIXLAB_ERR_DIVERGENCE;
  }
  return MIXLAB_ERR_INTERNAL;
}

template <class F>
mixlab_status guarded(F&& f) {
  try {
    f();
    return MIXLAB_OK;
  } catch (const mixlab::MixlabError& e) {
    last_error = e.what();
    return status_of(e.code());
  } catch (const std::bad_alloc&) {
    last_error = "out of memory";
  } catch (const std::exception& e) {
    last_error = e.what();
  } catch (...) {
    last_error = "unknown failure";
  }
  return MIXLAB_ERR_INTERNAL;
}

mixlab_status null_argument(const char* what) {
  last_error = std::string(what) + " must not be NULL";
  return MIXLAB_ERR_INVALID_ARGUMENT;
}

}  // namespace

extern "C" {

const char* mixlab_version(void) { return mixlab::kVersion; }

const char* mixlab_status_name(mixlab_status status) {
  switch (status) {
    case MIXLAB_OK: return "ok";
    case MIXLAB_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case MIXLAB_ERR_SHAPE: return "shape_mismatch";
    case MIXLAB_ERR_NON_FINITE: return "non_finite";
    case MIXLAB_ERR_FORMAT: return "format";
    case MIXLAB_ERR_IO: return "io";
    case MIXLAB_ERR_CONFIG: return "config";
    case MIXLAB_ERR_STATE: return "state";
    case MIXLAB_ERR_DIVERGENCE: return "divergence";
    case MIXLAB_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* mixlab_last_error(void) { return last_error.c_str(); }

int mixlab_exit_code(mixlab_status status) {
  if (status == MIXLAB_OK) return 0;
  return status == MIXLAB_ERR_CONFIG ? 2 : 1;
}

mixlab_status mixlab_config_load(const char* path, mixlab_config** out) {
  if (!path) return null_argument("path");
  if (!out) return null_argument("out");
  *out = nullptr;
  return guarded([&] { *out = new mixlab_config{mixlab::parse_config(path)}; });
}

mixlab_status mixlab_config_parse(const char* text, const char* origin, mixlab_config** out) {
  if (!text) return null_argument("text");
  if (!out) return null_argument("out");
  *out = nullptr;
  return guarded([&] { *out = new mixlab_config{mixlab::parse_config_text(text, origin ? origin : "<config>")}; });
}

mixlab_status mixlab_config_set_output_dir(mixlab_config* config, const char* dir) {
  if (!config) return null_argument("config");
  if (!dir || !*dir) return null_argument("dir");
  config->config.output_dir = dir;
  return MIXLAB_OK;
}

mixlab_status mixlab_config_resolved(const mixlab_config* config, char* buf, size_t capacity, size_t* needed) {
  if (!config) return null_argument("config");
  return guarded([&] {
    const std::string text = mixlab::resolved_config_text(config->config);
    if (needed) *needed = text.size() + 1;
    if (buf && capacity > text.size()) std::memcpy(buf, text.c_str(), text.size() + 1);
  });
}

void mixlab_config_free(mixlab_config* config) { delete config; }

mixlab_status mixlab_run(const mixlab_config* config) {
  if (!config) return null_argument("config");
  try {
    mixlab::run_experiment(config->config);
    return MIXLAB_OK;
  } catch (const std::exception& e) {
    mixlab::write_error_record(config->config.output_dir, e);
    return guarded([&] { throw; });
  }
}

mixlab_status mixlab_sweep(const mixlab_config* config, const char* grid) {
  if (!config) return null_argument("config");
  if (!grid) return null_argument("grid");
  try {
    mixlab::sweep_experiment(config->config, mixlab::parse_grid(grid));
    return MIXLAB_OK;
  } catch (const std::exception& e) {
    mixlab::write_error_record(config->config.output_dir, e);
    return guarded([&] { throw; });
  }
}

mixlab_status mixlab_cost(const char* profile, const char* method, double swap_rate, size_t rank, size_t members,
                          mixlab_cost_report* out) {
  if (!profile) return null_argument("profile");
  if (!method) return null_argument("method");
  if (!out) return null_argument("out");
  return guarded([&] {
    const mixlab::ArchProfile p = mixlab::builtin_profile(profile);
    const std::string m = method;
    mixlab::CostReport r;
    if (m == "erm") {
      r = mixlab::erm_cost(p);
    } else if (m == "mixout" || m == "fixed_mixout") {
      r = mixlab::mixout_cost(p, swap_rate);
    } else if (m == "ensemble" || m == "diwa") {
      r = mixlab::ensemble_cost(p, members, m == "diwa");
    } else if (m == "lora") {
      r = mixlab::lora_cost(p, rank);
    } else {
      mixlab::fail(mixlab::ErrorCode::invalid_argument,
                   "no cost model for method '" + m + "' (expected erm, mixout, fixed_mixout, ensemble, diwa or lora)");
    }
    *out = {r.fwd_gflops,   r.bwd_gflops,         r.total_gflops,       r.cost_t_ratio,      r.cost_i_ratio,
            r.grad_mem_fraction, r.backward_reduction, r.adapter_fwd_gflops, r.adapter_bwd_gflops};
  });
}

mixlab_status mixlab_verify(mixlab_verify_fn on_check, void* user, int* all_passed) {
  return guarded([&] {
    const auto report = mixlab::run_verify([&](const mixlab::VerifyCheck& c) {
      if (on_check) on_check(c.name.c_str(), c.passed ? 1 : 0, c.detail.c_str(), user);
    });
    if (all_passed) *all_passed = report.passed() ? 1 : 0;
  });
}

mixlab_status mixlab_model_load(const char* path, mixlab_model** out) {
  if (!path) return null_argument("path");
  if (!out) return null_argument("out");
  *out = nullptr;
  return guarded([&] { *out = new mixlab_model{mixlab::load_checkpoint(path)}; });
}

mixlab_status mixlab_model_save(const mixlab_model* model, const char* path) {
  if (!model) return null_argument("model");
  if (!path) return null_argument("path");
  return guarded([&] {
    const auto& c = model->checkpoint;
    mixlab::save_checkpoint(c.store, c.spec, path, c.seed, c.step);
  });
}

mixlab_status mixlab_model_sizes(const mixlab_model* model, size_t* input_size, size_t* classes) {
  if (!model) return null_argument("model");
  return guarded([&] {
    if (input_size) *input_size = model->checkpoint.spec.input_size();
    if (classes) *classes = model->checkpoint.spec.classes;
  });
}

mixlab_status mixlab_model_forward(const mixlab_model* model, const double* x, size_t rows, double* logits) {
  if (!model) return null_argument("model");
  if (!x) return null_argument("x");
  if (!logits) return null_argument("logits");
  return guarded([&] {
    const auto& spec = model->checkpoint.spec;
    mixlab::require(rows > 0, mixlab::ErrorCode::invalid_argument, "rows must be positive");
    const std::size_t n = spec.input_size();
    mixlab::Shape shape{rows};
    if (spec.arch == mixlab::Arch::micro_cnn)
      shape.insert(shape.end(), {spec.in_channels, spec.image_size, spec.image_size});
    else if (spec.arch == mixlab::Arch::micro_attn)
      shape.insert(shape.end(), {spec.tokens, spec.dim});
    else
      shape.push_back(n);
    mixlab::Tensor input(shape, std::vector<double>(x, x + rows * n), mixlab::DType::f64);
    input.finalize("model input");
    const mixlab::Tensor out = mixlab::forward(model->checkpoint.store, spec, input, nullptr, mixlab::DType::f64);
    std::memcpy(logits, out.data().data(), out.size() * sizeof(double));
  });
}

void mixlab_model_free(mixlab_model* model) { delete model; }

}  // extern "C"
