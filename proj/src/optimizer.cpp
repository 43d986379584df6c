// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/optimizer.hpp"

#include <cmath>

namespace mixlab {

const char* to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  fail(ErrorCode::invalid_argument, "unknown optimizer '" + s + "'");
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) {
  require(config_.lr > 0.0, ErrorCode::invalid_argument, "learning rate must be positive");
}

void Optimizer::step(ParamStore& store, const TensorMap& grads, const UpdateMasks* masks) {
  for (const auto& [name, grad] : grads) {
    MixParam& p = store.at(name);
    if (!p.trainable) continue;
    require(grad.shape() == p.theta.shape(), ErrorCode::shape_mismatch,
            "gradient for '" + name + "' has shape " + shape_str(grad.shape()));
    const GateMask* mask = nullptr;
    if (masks) {
      auto it = masks->find(name);
      if (it != masks->end()) mask = &it->second;
    }
    auto theta = p.theta.data();
    const DType dt = p.theta.dtype();

    if (config_.kind == OptimizerKind::sgd) {
      for (std::size_t i = 0; i < theta.size(); ++i) {
        if (mask && !(*mask)[i]) continue;
        const double g = grad[i] + config_.weight_decay * theta[i];
        theta[i] = round_to(dt, theta[i] - config_.lr * g);
      }
    } else {
      Slot& s = slots_[name];
      if (s.m.empty()) {
        s.m.assign(theta.size(), 0.0);
        s.v.assign(theta.size(), 0.0);
        s.t.assign(theta.size(), 0);
      }
      for (std::size_t i = 0; i < theta.size(); ++i) {
        if (mask && !(*mask)[i]) continue;
        const double g = grad[i] + config_.weight_decay * theta[i];
        s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * g;
        s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * g * g;
        const double t = static_cast<double>(++s.t[i]);
        const double mhat = s.m[i] / (1.0 - std::pow(config_.beta1, t));
        const double vhat = s.v[i] / (1.0 - std::pow(config_.beta2, t));
        theta[i] = round_to(dt, theta[i] - config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
      }
    }
    check_finite(p.theta.data(), "optimizer step");
  }
}

}  // namespace mixlab
