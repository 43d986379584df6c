// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "mixlab/graph.hpp"
#include "mixlab/model.hpp"
#include "mixlab/optimizer.hpp"
#include "mixlab/rng.hpp"

namespace mixlab {

/// How training and inference treat the swapped parameters. With keep
/// probability k = 1 - swap_rate and the swapped parameters
/// theta_xi = theta0 * (1 - xi) + theta * xi:
///   train_corrected  training runs at u = (theta_xi - (1-k) theta0) / k, so
///                    E[u] = theta and inference uses theta directly.
///   eval_expected    training runs at theta_xi; inference uses the mean
///                    network theta_bar = theta0 + k (theta - theta0).
///   raw              same parameters as eval_expected.
enum class ScalingMode { train_corrected, eval_expected, raw };

const char* to_string(ScalingMode m);
ScalingMode parse_scaling_mode(const std::string& s);

/// swap_rate is the fraction of parameters replaced by theta0 at each step
/// (the "masking probability"); a mask entry is 1 with probability
/// k = 1 - swap_rate.
struct MixoutConfig {
  double swap_rate = 0.9;
  ScalingMode scaling_mode = ScalingMode::train_corrected;
  std::uint64_t seed = 0;
  std::string rng_label = "mixout";
  /// Per-layer granularity override; layers not listed use the store's tag.
  std::map<std::string, Granularity> granularity;

  double keep() const noexcept { return 1.0 - swap_rate; }
  void validate() const;
};

/// One parameter's draw at its granularity. `units` holds one value per
/// granularity unit: the full parameter shape for element granularity, one
/// entry per output neuron or filter otherwise.
struct MaskEntry {
  Granularity granularity = Granularity::element;
  Shape param_shape;
  Tensor units;

  Tensor expanded() const;
  GateMask gate() const;
};

struct MaskRealization {
  std::map<std::string, MaskEntry> masks;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::string label;
};

/// Draw one mask for every eligible parameter from `stream`. A dense bias
/// shares its neuron's draw and a conv bias its filter's draw; at element
/// granularity every entry is independent.
MaskRealization draw_mask(const MixoutConfig& config, const ParamStore& store, const RngStream& stream);

/// The training mask for `step`; a pure function of (seed, label, step).
MaskRealization sample_mask(const MixoutConfig& config, const ParamStore& store, std::int64_t step);

/// The k-th Monte-Carlo sub-network mask used at inference.
MaskRealization mc_mask(const MixoutConfig& config, const ParamStore& store, std::int64_t k);

/// theta_xi for every masked parameter. The store is not modified.
TensorMap apply_swap(const ParamStore& store, const MaskRealization& mask);

/// Sub-network parameters seen by the model under `mask`: theta_xi, or the
/// corrected u in train_corrected mode.
TensorMap subnetwork_params(const ParamStore& store, const MixoutConfig& config, const MaskRealization& mask);

/// theta_bar = theta0 + k (theta - theta0) for every eligible parameter.
TensorMap expected_params(const ParamStore& store, const MixoutConfig& config);

/// Deterministic single-pass inference parameters for the configured mode.
TensorMap inference_params(const ParamStore& store, const MixoutConfig& config);

enum class McAverage { logits, probabilities };

/// Mean over K sub-network forwards (logits by default).
Tensor mc_predict(const ParamStore& store, const ModelSpec& spec, const Tensor& x, const MixoutConfig& config,
                  std::int64_t k, McAverage average = McAverage::logits);

/// max |mc_predict(K) - forward(inference_params)| over all logits.
double ensemble_surrogate_gap(const ParamStore& store, const ModelSpec& spec, const Tensor& x,
                              const MixoutConfig& config, std::int64_t k);

struct TrainStepReport {
  double loss = 0.0;
  /// Gradients with respect to the stored theta (gated entries are 0).
  TensorMap grads;
  MacCounters counters;
};

/// Knobs shared by every training method; the defaults give plain
/// fine-tuning.
struct TrainStepOptions {
  /// Fixed Mixout: reuse this mask instead of drawing a fresh one.
  const MaskRealization* fixed_mask = nullptr;
  /// LP-FT probe phase: every non-head parameter is fully gated.
  bool head_only = false;
  /// L2-SP coefficient; penalizes the deviation of the bound parameters.
  double l2sp_coeff = 0.0;
  RngStream* dropout_stream = nullptr;
  /// Also differentiate with respect to the input (cost accounting runs).
  bool input_requires_grad = false;
  std::optional<DType> dtype;
  TrainStepReport* report = nullptr;
};

/// One optimizer step. With a Mixout config, a fresh mask is drawn for `step`
/// (or options.fixed_mask is used), the forward runs at the swapped
/// parameters, swapped entries are gated to an exact zero gradient and left
/// untouched by the optimizer. Without one it is plain fine-tuning.
double train_step(ParamStore& store, const ModelSpec& spec, const Batch& batch, const MixoutConfig* config,
                  Optimizer& optimizer, std::int64_t step, const TrainStepOptions& options = {});

}  // namespace mixlab
