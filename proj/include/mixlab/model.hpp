// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mixlab/graph.hpp"
#include "mixlab/rng.hpp"
#include "mixlab/tensor.hpp"

namespace mixlab {

enum class Arch { linear, mlp, micro_cnn, micro_attn };
enum class Activation { identity, relu, tanh, gelu };
/// Unit of one mask draw: single entries, whole output neurons (rows of a
/// dense weight), or whole output filters of a convolution.
enum class Granularity { element, neuron, filter };
enum class ParamKind { dense_weight, dense_bias, conv_weight, conv_bias, norm_scale, norm_shift, adapter };

const char* to_string(Arch a);
const char* to_string(Activation a);
const char* to_string(Granularity g);
const char* to_string(ParamKind k);
Arch parse_arch(const std::string& s);
Activation parse_activation(const std::string& s);
Granularity parse_granularity(const std::string& s);
ParamKind parse_param_kind(const std::string& s);

/// Declarative architecture. Which fields matter depends on `arch`:
///   linear      input_dim -> classes, one dense map, no separate head
///   mlp         input_dim -> hidden... -> head(classes)
///   micro_cnn   image [in_channels, image_size, image_size] -> two 3x3 convs
///               with 2x2 max-pooling between them -> global average -> head
///   micro_attn  tokens x dim -> single-head self-attention + MLP sublayer,
///               residuals and layer norms -> token mean -> head
struct ModelSpec {
  Arch arch = Arch::mlp;
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::size_t in_channels = 1;
  std::size_t image_size = 16;
  std::vector<std::size_t> conv_channels{4, 8};
  std::size_t tokens = 4;
  std::size_t dim = 8;
  std::size_t mlp_dim = 16;
  std::size_t classes = 2;
  Activation activation = Activation::relu;
  Granularity dense_granularity = Granularity::element;
  bool linear_bias = true;
  /// Biases become Mixout-eligible (they share their neuron/filter draw).
  bool mix_biases = false;
  /// Layer-norm scale/shift become Mixout-eligible at element granularity.
  bool mix_norms = false;
  /// Training-time stochastic layers.
  double classifier_dropout = 0.0;
  double hidden_dropout = 0.0;
  double dropfilter_rate = 0.0;

  /// Feature count of one input sample.
  std::size_t input_size() const;
  void validate() const;

  bool operator==(const ModelSpec&) const = default;
};

struct ParamInfo {
  std::string name;
  Shape shape;
  ParamKind kind;
  std::string layer;
  bool head = false;
  bool eligible = false;
  Granularity granularity = Granularity::element;
};

/// Parameter table of a spec in forward order; the per-layer eligibility
/// flags live here. The head is never eligible.
std::vector<ParamInfo> param_layout(const ModelSpec& spec);

/// A trainable parameter and its frozen reference copy.
struct MixParam {
  Tensor theta;
  std::optional<Tensor> theta0;
  ParamKind kind = ParamKind::dense_weight;
  std::string layer;
  Granularity granularity = Granularity::element;
  bool head = false;
  bool eligible = false;
  bool trainable = true;
};

class ParamStore {
 public:
  void add(std::string name, MixParam param);
  bool contains(const std::string& name) const { return params_.contains(name); }
  const MixParam& at(const std::string& name) const;
  MixParam& at(const std::string& name);
  const MixParam* find(const std::string& name) const;
  MixParam* find(const std::string& name);
  /// Names in insertion order.
  const std::vector<std::string>& names() const noexcept { return order_; }
  std::size_t size() const noexcept { return order_.size(); }
  std::size_t parameter_count() const;
  TensorMap thetas() const;

  bool operator==(const ParamStore& other) const;

 private:
  std::vector<std::string> order_;
  std::map<std::string, MixParam> params_;
};

/// Bitwise comparison of theta and theta0 across two stores.
bool identical(const ParamStore& a, const ParamStore& b);

ParamStore build_model(const ModelSpec& spec, RngStream stream, DType dtype = DType::f32);

/// Replace the head with a fresh initialization drawn from `stream`.
void reset_head(ParamStore& store, const ModelSpec& spec, RngStream stream);

/// theta0 := copy of theta for every eligible parameter. Refuses to run twice.
void adopt_pretrained(ParamStore& store);

using VarMap = std::map<std::string, Var>;

struct ForwardOptions {
  bool training = false;
  /// Source of training-time dropout draws; required when training with a
  /// nonzero dropout rate.
  RngStream* dropout_stream = nullptr;
  /// Receives the attention probabilities of micro_attn, [B,T,T].
  std::vector<Tensor>* attention_out = nullptr;
};

/// Records the forward pass on `graph`; `params` binds every parameter name.
Var forward_graph(Graph& graph, const ModelSpec& spec, const VarMap& params, Var x,
                  const ForwardOptions& options = {});

/// Evaluation forward. Entries of `overrides` replace the stored theta of the
/// same name. Returns logits [batch, classes].
Tensor forward(const ParamStore& store, const ModelSpec& spec, const Tensor& x,
               const TensorMap* overrides = nullptr, std::optional<DType> dtype = std::nullopt);

std::vector<int> argmax_rows(const Tensor& logits);

/// Inputs [N, features...] and integer class labels.
struct Batch {
  Tensor x;
  std::vector<int> y;
};

/// Binds every stored parameter as a graph constant (with `overrides`
/// taking precedence) and folds LoRA adapters into their base weights.
VarMap bind_constants(Graph& graph, const ParamStore& store, const TensorMap* overrides = nullptr);

/// For every dense weight W with adapters "<layer>.lora_A" [out,r] and
/// "<layer>.lora_B" [r,in] bound in `params`, rebinds W to W + A*B.
void fold_adapters(VarMap& params, const ParamStore& store);

}  // namespace mixlab
