// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/graph.hpp"

namespace mixlab {

const Tensor& Var::value() const {
  require(graph_ != nullptr, ErrorCode::state, "use of an unbound Var");
  return graph_->value(*this);
}

const Graph::Node& Graph::node(Var v) const {
  require(v.graph() == this, ErrorCode::state, "Var belongs to a different graph");
  require(v.id() < nodes_.size(), ErrorCode::state, "Var id out of range");
  return nodes_[v.id()];
}

Var Graph::constant(Tensor value) {
  Node n;
  n.value = value.dtype() == dtype_ ? std::move(value) : value.as(dtype_);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::parameter(std::string name, Tensor value, GateMask gate) {
  require(!params_.contains(name), ErrorCode::invalid_argument, "duplicate parameter '" + name + "' on graph");
  require(gate.empty() || gate.size() == value.size(), ErrorCode::shape_mismatch,
          "gate for '" + name + "' has " + std::to_string(gate.size()) + " entries, parameter has " +
              std::to_string(value.size()));
  Node n;
  n.value = value.dtype() == dtype_ ? std::move(value) : value.as(dtype_);
  n.needs_grad = true;
  n.is_param = true;
  n.name = name;
  n.gate = std::move(gate);
  n.op = "parameter";
  nodes_.push_back(std::move(n));
  auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  params_.emplace(std::move(name), id);
  return Var(this, id);
}

const Tensor& Graph::value(Var v) const { return node(v).value; }

bool Graph::needs_grad(Var v) const { return node(v).needs_grad; }

const GateMask* Graph::gate(Var v) const {
  const auto& n = node(v);
  return n.gate.empty() ? nullptr : &n.gate;
}

const std::string* Graph::param_name(Var v) const {
  const auto& n = node(v);
  return n.is_param ? &n.name : nullptr;
}

Var Graph::record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op) {
  Node n;
  value.finalize(op);
  n.value = std::move(value);
  n.op = op;
  for (auto in : inputs) {
    const auto& src = node(in);
    n.inputs.push_back(in.id());
    n.needs_grad = n.needs_grad || src.needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

void Graph::accumulate(Var v, const Tensor& contribution) {
  auto& n = nodes_.at(v.id());
  if (!n.needs_grad) return;
  require(contribution.shape() == n.value.shape(), ErrorCode::shape_mismatch,
          std::string("gradient shape mismatch at op ") + n.op);
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), dtype_);
    n.has_grad = true;
  }
  auto g = n.grad.data();
  auto c = contribution.data();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = round_to(dtype_, g[i] + c[i]);
}

void Graph::count_weight_grad(Var weight, std::uint64_t macs) {
  counters_.weight_grad += macs;
  const auto& n = node(weight);
  counters_.weight_grad_by_param[n.is_param ? n.name : std::string("<derived>")] += macs;
}

TensorMap Graph::backward(Var loss) {
  const auto& root = node(loss);
  require(root.value.size() == 1, ErrorCode::shape_mismatch,
          "backward needs a scalar loss, got shape " + shape_str(root.value.shape()));
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  visit_order_.clear();

  if (root.needs_grad) {
    accumulate(loss, Tensor::ones(root.value.shape(), dtype_));
    for (std::int64_t i = loss.id(); i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.has_grad || !n.backward) continue;
      for (auto in : n.inputs)
        require(in < static_cast<std::uint32_t>(i), ErrorCode::state,
                std::string("cyclic graph detected at op ") + n.op);
      visit_order_.push_back(static_cast<std::uint32_t>(i));
      // The closure may accumulate into inputs, which never reallocates
      // nodes_, but take the gradient by value to keep it stable.
      Tensor grad_out = n.grad;
      auto fn = n.backward;
      fn(*this, grad_out);
    }
  }

  TensorMap grads;
  for (const auto& [name, id] : params_) {
    auto& n = nodes_[id];
    Tensor g = n.has_grad ? n.grad : Tensor(n.value.shape(), dtype_);
    if (!n.gate.empty()) {
      auto d = g.data();
      for (std::size_t i = 0; i < d.size(); ++i)
        if (!n.gate[i]) d[i] = 0.0;
    }
    g.finalize("backward");
    grads.emplace(name, std::move(g));
  }
  return grads;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& theta, double step) {
  require(step > 0.0, ErrorCode::invalid_argument, "finite difference step must be positive");
  Tensor grad(theta.shape(), DType::f64);
  Tensor probe = theta.as(DType::f64);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + step;
    const double up = f(probe);
    probe[i] = orig - step;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * step);
  }
  grad.finalize("finite_diff_grad");
  return grad;
}

}  // namespace mixlab
