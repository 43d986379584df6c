/* Copyright (c) 2026, mixlab developers
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface of libmixlab. Objects are opaque handles owned by the caller
 * and released with the matching _free function. Every call returns a
 * mixlab_status; on failure mixlab_last_error() describes the problem for
 * the calling thread until its next failing call.
 */
#ifndef MIXLAB_H
#define MIXLAB_H

#include <stddef.h>

#if defined(MIXLAB_BUILDING_LIBRARY)
#define MIXLAB_API __attribute__((visibility("default")))
#else
#define MIXLAB_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mixlab_status {
  MIXLAB_OK = 0,
  MIXLAB_ERR_INVALID_ARGUMENT = 1,
  MIXLAB_ERR_SHAPE = 2,
  MIXLAB_ERR_NON_FINITE = 3,
  MIXLAB_ERR_FORMAT = 4,
  MIXLAB_ERR_IO = 5,
  MIXLAB_ERR_CONFIG = 6,
  MIXLAB_ERR_STATE = 7,
  MIXLAB_ERR_DIVERGENCE = 8,
  MIXLAB_ERR_INTERNAL = 99
} mixlab_status;

MIXLAB_API const char* mixlab_version(void);
MIXLAB_API const char* mixlab_status_name(mixlab_status status);
MIXLAB_API const char* mixlab_last_error(void);
/* Process exit code for a status: 0 ok, 2 configuration error, 1 otherwise. */
MIXLAB_API int mixlab_exit_code(mixlab_status status);

/* ---- experiment configuration ---- */

typedef struct mixlab_config mixlab_config;

MIXLAB_API mixlab_status mixlab_config_load(const char* path, mixlab_config** out);
/* `origin` names the text in error messages; may be NULL. */
MIXLAB_API mixlab_status mixlab_config_parse(const char* text, const char* origin, mixlab_config** out);
MIXLAB_API mixlab_status mixlab_config_set_output_dir(mixlab_config* config, const char* dir);
/* Copies the canonical text (NUL-terminated) into buf when it fits; *needed
 * receives the full length including the terminator. */
MIXLAB_API mixlab_status mixlab_config_resolved(const mixlab_config* config, char* buf, size_t capacity,
                                                size_t* needed);
MIXLAB_API void mixlab_config_free(mixlab_config* config);

/* Runs the experiment and writes its output directory. On failure the
 * directory receives error.json. */
MIXLAB_API mixlab_status mixlab_run(const mixlab_config* config);
/* grid: "start:stop:step" or a comma-separated list inside [0,1]. */
MIXLAB_API mixlab_status mixlab_sweep(const mixlab_config* config, const char* grid);

/* ---- analytic cost model ---- */

typedef struct mixlab_cost_report {
  double fwd_gflops;
  double bwd_gflops;
  double total_gflops;
  double cost_t_ratio;
  double cost_i_ratio;
  double grad_mem_fraction;
  double backward_reduction;
  double adapter_fwd_gflops;
  double adapter_bwd_gflops;
} mixlab_cost_report;

/* profile: resnet50 | vit_s16. method: erm | mixout | fixed_mixout |
 * ensemble | diwa | lora. Arguments the method does not use are ignored. */
MIXLAB_API mixlab_status mixlab_cost(const char* profile, const char* method, double swap_rate, size_t rank,
                                     size_t members, mixlab_cost_report* out);

/* ---- built-in invariant checks ---- */

typedef void (*mixlab_verify_fn)(const char* name, int passed, const char* detail, void* user);

/* *all_passed is 1 when every check passed. The callback may be NULL. */
MIXLAB_API mixlab_status mixlab_verify(mixlab_verify_fn on_check, void* user, int* all_passed);

/* ---- checkpoints ---- */

typedef struct mixlab_model mixlab_model;

MIXLAB_API mixlab_status mixlab_model_load(const char* path, mixlab_model** out);
MIXLAB_API mixlab_status mixlab_model_save(const mixlab_model* model, const char* path);
/* Features per input row and number of classes. */
MIXLAB_API mixlab_status mixlab_model_sizes(const mixlab_model* model, size_t* input_size, size_t* classes);
/* x holds rows * input_size doubles; logits receives rows * classes. */
MIXLAB_API mixlab_status mixlab_model_forward(const mixlab_model* model, const double* x, size_t rows,
                                              double* logits);
MIXLAB_API void mixlab_model_free(mixlab_model* model);

#ifdef __cplusplus
}
#endif

#endif /* MIXLAB_H */
