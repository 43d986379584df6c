// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mixlab/tensor.hpp"

namespace mixlab {

class Graph;

/// Handle to a value recorded on a Graph. Cheap to copy; valid while the
/// graph is alive.
class Var {
 public:
  Var() = default;

  Graph* graph() const noexcept { return graph_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph;
  Var(Graph* graph, std::uint32_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Per-entry gradient gate of a parameter: 1 lets the gradient through, 0
/// pins it to exactly zero and lets gate-aware ops skip the computation.
using GateMask = std::vector<std::uint8_t>;

/// Multiply-accumulate counters filled while recording and differentiating.
struct MacCounters {
  std::uint64_t forward = 0;
  std::uint64_t input_grad = 0;
  std::uint64_t weight_grad = 0;
  std::map<std::string, std::uint64_t> weight_grad_by_param;
};

/// Tape of primitive operations for one forward pass. Nodes are appended in
/// creation order, which is a topological order; backward walks the tape in
/// reverse and visits each node once.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor& grad_out)>;

  explicit Graph(DType dtype = DType::f32) : dtype_(dtype) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  DType dtype() const noexcept { return dtype_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value);
  /// Named trainable leaf. An empty gate means "no gate".
  Var parameter(std::string name, Tensor value, GateMask gate = {});

  const Tensor& value(Var v) const;
  bool needs_grad(Var v) const;
  const GateMask* gate(Var v) const;
  const std::string* param_name(Var v) const;

  /// Reverse-mode pass from a one-element loss. Returns the gradient of every
  /// parameter leaf by name (zero tensor when the loss does not reach it).
  TensorMap backward(Var loss);

  /// Node ids in the order the last backward() visited them.
  const std::vector<std::uint32_t>& last_visit_order() const noexcept { return visit_order_; }

  const MacCounters& counters() const noexcept { return counters_; }

  // Used by primitive implementations.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op);
  void accumulate(Var v, const Tensor& contribution);
  void count_forward(std::uint64_t macs) { counters_.forward += macs; }
  void count_input_grad(std::uint64_t macs) { counters_.input_grad += macs; }
  void count_weight_grad(Var weight, std::uint64_t macs);

 private:
  struct Node {
    Tensor value;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    bool is_param = false;
    std::string name;
    GateMask gate;
    const char* op = "";
  };

  const Node& node(Var v) const;

  DType dtype_;
  std::vector<Node> nodes_;
  std::map<std::string, std::uint32_t> params_;
  std::vector<std::uint32_t> visit_order_;
  MacCounters counters_;
};

// Primitives. All operands must live on the same graph.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var mul_const(Var a, const Tensor& c);
Var scale(Var a, double c);
Var square(Var a);
Var sum(Var a);
Var mean(Var a);
Var reshape(Var a, Shape shape);

Var relu(Var a);
Var tanh(Var a);
Var gelu(Var a);

/// y[n,o] = sum_i x[n,i] w[o,i] + b[o]; w is [out,in].
Var linear(Var x, Var w, std::optional<Var> b = std::nullopt);
Var matmul(Var a, Var b);
Var bmm(Var a, Var b);
Var transpose_last2(Var a);
Var softmax_last(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

/// Cross-correlation (no kernel flip). x [B,Cin,H,W], w [Cout,Cin,kH,kW].
Var conv2d(Var x, Var w, std::optional<Var> b, std::size_t stride, std::size_t padding);
Var max_pool2d(Var x, std::size_t window);
Var global_avg_pool(Var x);
/// [B,T,D] -> [B,D]
Var mean_tokens(Var x);

/// Mean softmax cross-entropy of logits [N,C] against integer labels.
Var cross_entropy(Var logits, std::span<const int> labels);

/// Central differences (f(t + h e_i) - f(t - h e_i)) / 2h for every entry.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& theta, double step);

}  // namespace mixlab
