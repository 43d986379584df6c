// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/mixout.hpp"

#include <cmath>

namespace mixlab {

const char* to_string(ScalingMode m) {
  switch (m) {
    case ScalingMode::train_corrected: return "train_corrected";
    case ScalingMode::eval_expected: return "eval_expected";
    case ScalingMode::raw: return "raw";
  }
  return "?";
}

ScalingMode parse_scaling_mode(const std::string& s) {
  if (s == "train_corrected") return ScalingMode::train_corrected;
  if (s == "eval_expected") return ScalingMode::eval_expected;
  if (s == "raw") return ScalingMode::raw;
  fail(ErrorCode::invalid_argument, "unknown scaling mode '" + s + "'");
}

void MixoutConfig::validate() const {
  require(swap_rate >= 0.0 && swap_rate <= 1.0, ErrorCode::invalid_argument,
          "swap_rate must lie in [0,1], got " + std::to_string(swap_rate));
  require(!(scaling_mode == ScalingMode::train_corrected && keep() == 0.0), ErrorCode::invalid_argument,
          "swap_rate 1 leaves keep probability 0; train_corrected divides by it (use eval_expected)");
}

Tensor MaskEntry::expanded() const {
  if (granularity == Granularity::element) return units;
  const std::size_t n = numel(param_shape);
  const std::size_t groups = units.size();
  require(groups > 0 && n % groups == 0, ErrorCode::shape_mismatch,
          "mask with " + std::to_string(groups) + " units does not tile " + shape_str(param_shape));
  const std::size_t per = n / groups;
  Tensor out(param_shape, units.dtype());
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t j = 0; j < per; ++j) out[g * per + j] = units[g];
  return out;
}

GateMask MaskEntry::gate() const {
  const Tensor e = expanded();
  GateMask m(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) m[i] = e[i] != 0.0 ? 1 : 0;
  return m;
}

namespace {

bool is_dense(ParamKind k) { return k == ParamKind::dense_weight || k == ParamKind::dense_bias; }
bool is_conv(ParamKind k) { return k == ParamKind::conv_weight || k == ParamKind::conv_bias; }

Granularity effective_granularity(const MixoutConfig& config, const std::string& name, const MixParam& p) {
  Granularity g = p.granularity;
  if (auto it = config.granularity.find(p.layer); it != config.granularity.end()) g = it->second;
  if (p.kind == ParamKind::norm_scale || p.kind == ParamKind::norm_shift || p.kind == ParamKind::adapter)
    return Granularity::element;
  if (is_conv(p.kind))
    require(g == Granularity::filter, ErrorCode::config,
            "conv parameter '" + name + "' takes filter granularity, got " + to_string(g));
  if (is_dense(p.kind))
    require(g != Granularity::filter, ErrorCode::config,
            "dense parameter '" + name + "' takes element or neuron granularity");
  return g;
}

const Tensor& reference_of(const std::string& name, const MixParam& p) {
  require(p.theta0.has_value(), ErrorCode::state,
          "parameter '" + name + "' is Mixout-eligible but has no reference weights (call adopt_pretrained)");
  return *p.theta0;
}

// u = (theta_xi - (1-k) theta0) / k, rounded after every operation.
Tensor corrected(const Tensor& swapped, const Tensor& theta0, double k) {
  require(k > 0.0, ErrorCode::invalid_argument, "train_corrected scaling needs keep probability > 0");
  const DType dt = swapped.dtype();
  const double shift = 1.0 - k;
  const double inv = 1.0 / k;
  Tensor u(swapped.shape(), dt);
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double c = round_to(dt, theta0[i] * shift);
    const double d = round_to(dt, swapped[i] - c);
    u[i] = d * inv;
  }
  u.finalize("train_corrected");
  return u;
}

Tensor swap(const Tensor& theta, const Tensor& theta0, const Tensor& mask) {
  Tensor out(theta.shape(), theta.dtype());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask[i] != 0.0 ? theta[i] : theta0[i];
  return out;
}

}  // namespace

MaskRealization draw_mask(const MixoutConfig& config, const ParamStore& store, const RngStream& stream) {
  config.validate();
  MaskRealization out;
  out.seed = stream.seed();
  out.label = stream.label();
  std::map<std::string, Tensor> unit_draws;
  for (const auto& name : store.names()) {
    const MixParam& p = store.at(name);
    if (!p.eligible || p.head) continue;
    reference_of(name, p);
    MaskEntry entry;
    entry.granularity = effective_granularity(config, name, p);
    entry.param_shape = p.theta.shape();
    if (entry.granularity == Granularity::element) {
      RngStream s = stream.derive(name);
      entry.units = bernoulli_mask(s, entry.param_shape, config.swap_rate);
    } else {
      const std::size_t units = entry.param_shape.at(0);
      auto it = unit_draws.find(p.layer);
      if (it == unit_draws.end()) {
        RngStream s = stream.derive(p.layer + "#units");
        it = unit_draws.emplace(p.layer, bernoulli_mask(s, {units}, config.swap_rate)).first;
      }
      require(it->second.size() == units, ErrorCode::shape_mismatch,
              "parameter '" + name + "' does not share its layer's unit count");
      entry.units = it->second;
    }
    out.masks.emplace(name, std::move(entry));
  }
  return out;
}

MaskRealization sample_mask(const MixoutConfig& config, const ParamStore& store, std::int64_t step) {
  const RngStream base(config.seed, config.rng_label);
  MaskRealization m = draw_mask(config, store, base.derive("step" + std::to_string(step)));
  m.step = step;
  return m;
}

MaskRealization mc_mask(const MixoutConfig& config, const ParamStore& store, std::int64_t k) {
  const RngStream base(config.seed, config.rng_label + "/mc");
  MaskRealization m = draw_mask(config, store, base.derive("sample" + std::to_string(k)));
  m.step = k;
  return m;
}

TensorMap apply_swap(const ParamStore& store, const MaskRealization& mask) {
  TensorMap out;
  for (const auto& [name, entry] : mask.masks) {
    const MixParam& p = store.at(name);
    require(entry.param_shape == p.theta.shape(), ErrorCode::shape_mismatch,
            "mask for '" + name + "' has shape " + shape_str(entry.param_shape) + ", parameter has " +
                shape_str(p.theta.shape()));
    out.emplace(name, swap(p.theta, reference_of(name, p), entry.expanded()));
  }
  return out;
}

TensorMap subnetwork_params(const ParamStore& store, const MixoutConfig& config, const MaskRealization& mask) {
  TensorMap swapped = apply_swap(store, mask);
  if (config.scaling_mode != ScalingMode::train_corrected) return swapped;
  for (auto& [name, t] : swapped) t = corrected(t, *store.at(name).theta0, config.keep());
  return swapped;
}

TensorMap expected_params(const ParamStore& store, const MixoutConfig& config) {
  const double k = config.keep();
  require(k >= 0.0 && k <= 1.0, ErrorCode::invalid_argument, "swap_rate must lie in [0,1]");
  TensorMap out;
  for (const auto& name : store.names()) {
    const MixParam& p = store.at(name);
    if (!p.eligible || p.head) continue;
    const Tensor& t0 = reference_of(name, p);
    Tensor bar(p.theta.shape(), p.theta.dtype());
    for (std::size_t i = 0; i < bar.size(); ++i) bar[i] = t0[i] + k * (p.theta[i] - t0[i]);
    bar.finalize("expected_params");
    out.emplace(name, std::move(bar));
  }
  return out;
}

TensorMap inference_params(const ParamStore& store, const MixoutConfig& config) {
  config.validate();
  if (config.scaling_mode != ScalingMode::train_corrected) return expected_params(store, config);
  TensorMap out;
  for (const auto& name : store.names()) {
    const MixParam& p = store.at(name);
    if (p.eligible && !p.head) out.emplace(name, p.theta);
  }
  return out;
}

Tensor mc_predict(const ParamStore& store, const ModelSpec& spec, const Tensor& x, const MixoutConfig& config,
                  std::int64_t k, McAverage average) {
  require(k >= 1, ErrorCode::invalid_argument, "mc_predict needs K >= 1, got " + std::to_string(k));
  std::optional<Tensor> acc;
  for (std::int64_t i = 0; i < k; ++i) {
    const TensorMap params = subnetwork_params(store, config, mc_mask(config, store, i));
    Tensor logits = forward(store, spec, x, &params, DType::f64);
    if (average == McAverage::probabilities) {
      const std::size_t n = logits.dim(0), c = logits.dim(1);
      for (std::size_t r = 0; r < n; ++r) {
        double mx = logits[r * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits[r * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(logits[r * c + j] - mx);
        for (std::size_t j = 0; j < c; ++j) logits[r * c + j] = std::exp(logits[r * c + j] - mx) / z;
      }
    }
    if (!acc) {
      acc = std::move(logits);
    } else {
      for (std::size_t j = 0; j < acc->size(); ++j) (*acc)[j] += logits[j];
    }
  }
  for (auto& v : acc->data()) v /= static_cast<double>(k);
  acc->finalize("mc_predict");
  return *acc;
}

double ensemble_surrogate_gap(const ParamStore& store, const ModelSpec& spec, const Tensor& x,
                              const MixoutConfig& config, std::int64_t k) {
  const Tensor mc = mc_predict(store, spec, x, config, k);
  const TensorMap surrogate = inference_params(store, config);
  return max_abs_diff(mc, forward(store, spec, x, &surrogate, DType::f64));
}

double train_step(ParamStore& store, const ModelSpec& spec, const Batch& batch, const MixoutConfig* config,
                  Optimizer& optimizer, std::int64_t step, const TrainStepOptions& options) {
  require(store.size() > 0, ErrorCode::state, "train_step on an empty model");
  require(batch.x.size() > 0 && batch.y.size() == batch.x.dim(0), ErrorCode::shape_mismatch,
          "batch has " + std::to_string(batch.y.size()) + " labels for " + shape_str(batch.x.shape()));
  const DType dt = options.dtype.value_or(store.at(store.names().front()).theta.dtype());

  MaskRealization drawn;
  const MaskRealization* mask = nullptr;
  if (config) {
    config->validate();
    if (options.fixed_mask) {
      mask = options.fixed_mask;
    } else {
      drawn = sample_mask(*config, store, step);
      mask = &drawn;
    }
  }
  const bool corrected_mode = config && config->scaling_mode == ScalingMode::train_corrected;
  const double k = config ? config->keep() : 1.0;

  Graph graph(dt);
  VarMap bound;
  UpdateMasks gates;
  std::map<std::string, Var> reference;
  for (const auto& name : store.names()) {
    const MixParam& p = store.at(name);
    if (!p.trainable) {
      bound.emplace(name, graph.constant(p.theta));
      continue;
    }
    Tensor value = p.theta;
    GateMask gate;
    if (mask) {
      if (auto it = mask->masks.find(name); it != mask->masks.end()) {
        const Tensor e = it->second.expanded();
        value = swap(p.theta, *p.theta0, e);
        if (corrected_mode) value = corrected(value, *p.theta0, k);
        gate = it->second.gate();
      }
    }
    if (options.head_only && !p.head) gate.assign(p.theta.size(), 0);
    Var v = graph.parameter(name, std::move(value), gate);
    if (!gate.empty()) gates.emplace(name, std::move(gate));
    bound.emplace(name, v);
    if (options.l2sp_coeff != 0.0 && p.theta0) reference.emplace(name, graph.constant(*p.theta0));
  }
  fold_adapters(bound, store);

  static const std::string kInput = "<input>";
  Var x = options.input_requires_grad ? graph.parameter(kInput, batch.x) : graph.constant(batch.x);
  ForwardOptions fo;
  fo.training = true;
  fo.dropout_stream = options.dropout_stream;

  double loss_value = 0.0;
  TensorMap grads;
  try {
    Var logits = forward_graph(graph, spec, bound, x, fo);
    Var loss = cross_entropy(logits, batch.y);
    if (options.l2sp_coeff != 0.0) {
      std::optional<Var> pen;
      for (const auto& [name, ref] : reference) {
        Var term = sum(square(sub(bound.at(name), ref)));
        pen = pen ? add(*pen, term) : term;
      }
      if (pen) loss = add(loss, scale(*pen, options.l2sp_coeff));
    }
    loss_value = loss.value().item();
    grads = graph.backward(loss);
  } catch (const MixlabError& e) {
    if (e.code() == ErrorCode::non_finite)
      fail(ErrorCode::divergence, "training diverged at step " + std::to_string(step) + ": " + e.what());
    throw;
  }
  grads.erase(kInput);

  if (corrected_mode && k != 1.0) {
    const double inv = 1.0 / k;
    for (const auto& [name, entry] : mask->masks) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      const GateMask& gate = gates.at(name);
      auto g = it->second.data();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (gate[i]) g[i] = round_to(dt, g[i] * inv);
      it->second.finalize("train_step");
    }
  }

  if (options.report) {
    options.report->loss = loss_value;
    options.report->grads = grads;
    options.report->counters = graph.counters();
  }
  optimizer.step(store, grads, &gates);
  return loss_value;
}

}  // namespace mixlab
