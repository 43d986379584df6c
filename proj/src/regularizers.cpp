// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/regularizers.hpp"

#include <algorithm>
#include <cmath>

namespace mixlab {

double l2sp_penalty(const ParamStore& store, double coeff) {
  double total = 0.0;
  for (const auto& name : store.names()) {
    const MixParam& p = store.at(name);
    if (!p.theta0) continue;
    for (std::size_t i = 0; i < p.theta.size(); ++i) {
      const double d = p.theta[i] - (*p.theta0)[i];
      total += d * d;
    }
  }
  return coeff * total;
}

TensorMap l2sp_gradient(const ParamStore& store, double coeff) {
  TensorMap out;
  for (const auto& name : store.names()) {
    const MixParam& p = store.at(name);
    if (!p.theta0) continue;
    Tensor g(p.theta.shape(), DType::f64);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.0 * coeff * (p.theta[i] - (*p.theta0)[i]);
    out.emplace(name, std::move(g));
  }
  return out;
}

void ma_update(ParamStore& avg, const ParamStore& store, std::size_t n) {
  if (n == 0) {
    avg = store;
    return;
  }
  const double denom = static_cast<double>(n + 1);
  for (const auto& name : store.names()) {
    const MixParam& src = store.at(name);
    MixParam* dst = avg.find(name);
    require(dst != nullptr && dst->theta.shape() == src.theta.shape(), ErrorCode::shape_mismatch,
            "moving average: parameter '" + name + "' does not match");
    auto a = dst->theta.data();
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = a[i] + (src.theta[i] - a[i]) / denom;
    dst->theta.finalize("ma_update");
  }
}

void MovingAverage::update(const ParamStore& store, std::int64_t step) {
  if (step < start_) return;
  ma_update(avg_, store, count_);
  ++count_;
}

const ParamStore& MovingAverage::average() const {
  require(count_ > 0, ErrorCode::state, "moving average has no snapshots yet");
  return avg_;
}

LpftPhase lpft_schedule(std::int64_t step, std::int64_t boundary) {
  require(boundary >= 0, ErrorCode::invalid_argument, "LP-FT boundary must be >= 0");
  return step < boundary ? LpftPhase::head_only : LpftPhase::full;
}

MaskRealization fixed_mixout_masks(const MixoutConfig& config, const ParamStore& store, const RngStream& stream) {
  MaskRealization m = draw_mask(config, store, stream.derive("fixed"));
  m.step = 0;
  return m;
}

Tensor deep_ensemble_predict(std::span<const ParamStore> members, const ModelSpec& spec, const Tensor& x) {
  require(!members.empty(), ErrorCode::invalid_argument, "ensemble needs at least one member");
  const auto layout = param_layout(spec);
  std::optional<Tensor> acc;
  for (const auto& m : members) {
    for (const auto& info : layout) {
      const MixParam* p = m.find(info.name);
      require(p != nullptr && p->theta.shape() == info.shape, ErrorCode::shape_mismatch,
              "ensemble member does not match the model at '" + info.name + "'");
    }
    Tensor logits = forward(m, spec, x, nullptr, DType::f64);
    if (!acc) {
      acc = std::move(logits);
    } else {
      for (std::size_t i = 0; i < acc->size(); ++i) (*acc)[i] += logits[i];
    }
  }
  for (auto& v : acc->data()) v /= static_cast<double>(members.size());
  acc->finalize("deep_ensemble_predict");
  return *acc;
}

ParamStore weight_average(std::span<const ParamStore> members) {
  require(!members.empty(), ErrorCode::invalid_argument, "weight averaging needs at least one member");
  ParamStore out = members.front();
  for (const auto& name : out.names()) {
    MixParam& dst = out.at(name);
    std::vector<double> acc(dst.theta.size(), 0.0);
    for (const auto& m : members) {
      require(m.size() == out.size(), ErrorCode::shape_mismatch, "weight averaging: members differ in parameters");
      const MixParam* p = m.find(name);
      require(p != nullptr, ErrorCode::shape_mismatch, "weight averaging: member lacks '" + name + "'");
      require(p->theta.shape() == dst.theta.shape(), ErrorCode::shape_mismatch,
              "weight averaging: '" + name + "' has shape " + shape_str(p->theta.shape()));
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p->theta[i];
    }
    for (std::size_t i = 0; i < acc.size(); ++i) dst.theta[i] = acc[i] / static_cast<double>(members.size());
    dst.theta.finalize("weight_average");
  }
  return out;
}

ParamStore lora_wrap(const ParamStore& store, const ModelSpec& spec, std::size_t rank, RngStream stream) {
  require(rank > 0, ErrorCode::invalid_argument, "LoRA rank must be positive");
  ParamStore out;
  std::size_t wrapped = 0;
  for (const auto& info : param_layout(spec)) {
    const MixParam* src = store.find(info.name);
    require(src != nullptr, ErrorCode::shape_mismatch, "lora_wrap: model lacks '" + info.name + "'");
    MixParam p = *src;
    if (!p.head) p.trainable = false;
    const bool adapt = info.kind == ParamKind::dense_weight && !info.head;
    out.add(info.name, std::move(p));
    if (!adapt) continue;
    const std::size_t o = info.shape[0], in = info.shape[1];
    require(rank <= std::min(o, in), ErrorCode::invalid_argument,
            "LoRA rank " + std::to_string(rank) + " exceeds min(out,in) = " + std::to_string(std::min(o, in)) +
                " for layer '" + info.layer + "'");
    const DType dt = src->theta.dtype();
    MixParam a;
    a.theta = Tensor({o, rank}, dt);
    a.kind = ParamKind::adapter;
    a.layer = info.layer;
    MixParam b = a;
    b.theta = Tensor({rank, in}, dt);
    RngStream s = stream.derive(info.layer);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : b.theta.data()) v = s.uniform(-bound, bound);
    b.theta.finalize("lora_wrap");
    out.add(info.layer + ".lora_A", std::move(a));
    out.add(info.layer + ".lora_B", std::move(b));
    ++wrapped;
  }
  require(wrapped > 0, ErrorCode::invalid_argument,
          std::string("lora_wrap: architecture '") + to_string(spec.arch) + "' has no dense body layers");
  return out;
}

ParamStore lora_merge(const ParamStore& store) {
  ParamStore out;
  for (const auto& name : store.names()) {
    const MixParam& p = store.at(name);
    if (p.kind == ParamKind::adapter) continue;
    MixParam q = p;
    const MixParam* a = p.kind == ParamKind::dense_weight ? store.find(p.layer + ".lora_A") : nullptr;
    const MixParam* b = p.kind == ParamKind::dense_weight ? store.find(p.layer + ".lora_B") : nullptr;
    if (a && b) {
      const std::size_t o = p.theta.dim(0), in = p.theta.dim(1), r = a->theta.dim(1);
      for (std::size_t i = 0; i < o; ++i)
        for (std::size_t j = 0; j < in; ++j) {
          double s = 0.0;
          for (std::size_t t = 0; t < r; ++t) s += a->theta[i * r + t] * b->theta[t * in + j];
          q.theta[i * in + j] = p.theta[i * in + j] + s;
        }
      q.theta.finalize("lora_merge");
    }
    out.add(name, std::move(q));
  }
  return out;
}

std::size_t trainable_parameter_count(const ParamStore& store) {
  std::size_t n = 0;
  for (const auto& name : store.names())
    if (store.at(name).trainable) n += store.at(name).theta.size();
  return n;
}

}  // namespace mixlab
