// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/model.hpp"

#include <cmath>

#include "mixlab/dropout.hpp"

namespace mixlab {

const char* to_string(Arch a) {
  switch (a) {
    case Arch::linear: return "linear";
    case Arch::mlp: return "mlp";
    case Arch::micro_cnn: return "micro_cnn";
    case Arch::micro_attn: return "micro_attn";
  }
  return "?";
}

const char* to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::gelu: return "gelu";
  }
  return "?";
}

const char* to_string(Granularity g) {
  switch (g) {
    case Granularity::element: return "element";
    case Granularity::neuron: return "neuron";
    case Granularity::filter: return "filter";
  }
  return "?";
}

const char* to_string(ParamKind k) {
  switch (k) {
    case ParamKind::dense_weight: return "dense_weight";
    case ParamKind::dense_bias: return "dense_bias";
    case ParamKind::conv_weight: return "conv_weight";
    case ParamKind::conv_bias: return "conv_bias";
    case ParamKind::norm_scale: return "norm_scale";
    case ParamKind::norm_shift: return "norm_shift";
    case ParamKind::adapter: return "adapter";
  }
  return "?";
}

Arch parse_arch(const std::string& s) {
  for (auto a : {Arch::linear, Arch::mlp, Arch::micro_cnn, Arch::micro_attn})
    if (s == to_string(a)) return a;
  fail(ErrorCode::invalid_argument, "unknown architecture '" + s + "'");
}

Activation parse_activation(const std::string& s) {
  for (auto a : {Activation::identity, Activation::relu, Activation::tanh, Activation::gelu})
    if (s == to_string(a)) return a;
  fail(ErrorCode::invalid_argument, "unknown activation '" + s + "'");
}

Granularity parse_granularity(const std::string& s) {
  for (auto g : {Granularity::element, Granularity::neuron, Granularity::filter})
    if (s == to_string(g)) return g;
  fail(ErrorCode::invalid_argument, "unknown granularity '" + s + "'");
}

ParamKind parse_param_kind(const std::string& s) {
  for (auto k : {ParamKind::dense_weight, ParamKind::dense_bias, ParamKind::conv_weight, ParamKind::conv_bias,
                 ParamKind::norm_scale, ParamKind::norm_shift, ParamKind::adapter})
    if (s == to_string(k)) return k;
  fail(ErrorCode::format, "unknown parameter kind '" + s + "'");
}

std::size_t ModelSpec::input_size() const {
  switch (arch) {
    case Arch::linear:
    case Arch::mlp: return input_dim;
    case Arch::micro_cnn: return in_channels * image_size * image_size;
    case Arch::micro_attn: return tokens * dim;
  }
  return 0;
}

void ModelSpec::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorCode::invalid_argument, "model spec: " + m); };
  if (classes == 0) bad("classes must be positive");
  switch (arch) {
    case Arch::linear:
    case Arch::mlp:
      if (input_dim == 0) bad("input_dim must be positive");
      for (auto h : hidden)
        if (h == 0) bad("hidden widths must be positive");
      if (arch == Arch::mlp && hidden.empty()) bad("mlp needs at least one hidden layer");
      break;
    case Arch::micro_cnn:
      if (in_channels == 0) bad("in_channels must be positive");
      if (conv_channels.size() != 2) bad("micro_cnn needs exactly two conv layers");
      for (auto c : conv_channels)
        if (c == 0) bad("conv channels must be positive");
      if (image_size < 2 || image_size % 2 != 0) bad("image_size must be even and >= 2");
      break;
    case Arch::micro_attn:
      if (tokens == 0 || dim == 0 || mlp_dim == 0) bad("tokens, dim and mlp_dim must be positive");
      break;
  }
  if (dense_granularity == Granularity::filter) bad("dense layers take element or neuron granularity");
  for (double r : {classifier_dropout, hidden_dropout, dropfilter_rate})
    if (!(r >= 0.0 && r < 1.0)) bad("dropout rates must lie in [0,1)");
}

std::vector<ParamInfo> param_layout(const ModelSpec& spec) {
  spec.validate();
  std::vector<ParamInfo> out;
  auto dense = [&](const std::string& layer, std::size_t in, std::size_t outw, bool head, bool bias = true) {
    out.push_back({layer + ".weight", {outw, in}, ParamKind::dense_weight, layer, head, !head,
                   spec.dense_granularity});
    if (bias)
      out.push_back({layer + ".bias", {outw}, ParamKind::dense_bias, layer, head, !head && spec.mix_biases,
                     spec.dense_granularity});
  };
  auto norm = [&](const std::string& layer, std::size_t d) {
    out.push_back({layer + ".scale", {d}, ParamKind::norm_scale, layer, false, spec.mix_norms, Granularity::element});
    out.push_back({layer + ".shift", {d}, ParamKind::norm_shift, layer, false, spec.mix_norms, Granularity::element});
  };

  switch (spec.arch) {
    case Arch::linear:
      dense("linear", spec.input_dim, spec.classes, false, spec.linear_bias);
      break;
    case Arch::mlp: {
      std::size_t in = spec.input_dim;
      for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
        dense("fc" + std::to_string(i), in, spec.hidden[i], false);
        in = spec.hidden[i];
      }
      dense("head", in, spec.classes, true);
      break;
    }
    case Arch::micro_cnn: {
      std::size_t in = spec.in_channels;
      for (std::size_t i = 0; i < 2; ++i) {
        const std::string layer = "conv" + std::to_string(i);
        const std::size_t c = spec.conv_channels[i];
        out.push_back({layer + ".weight", {c, in, 3, 3}, ParamKind::conv_weight, layer, false, true,
                       Granularity::filter});
        out.push_back({layer + ".bias", {c}, ParamKind::conv_bias, layer, false, spec.mix_biases,
                       Granularity::filter});
        in = c;
      }
      dense("head", in, spec.classes, true);
      break;
    }
    case Arch::micro_attn:
      for (const char* p : {"attn.q", "attn.k", "attn.v", "attn.o"}) dense(p, spec.dim, spec.dim, false);
      norm("ln1", spec.dim);
      dense("mlp.fc0", spec.dim, spec.mlp_dim, false);
      dense("mlp.fc1", spec.mlp_dim, spec.dim, false);
      norm("ln2", spec.dim);
      dense("head", spec.dim, spec.classes, true);
      break;
  }
  return out;
}

void ParamStore::add(std::string name, MixParam param) {
  require(!params_.contains(name), ErrorCode::invalid_argument, "duplicate parameter name '" + name + "'");
  if (param.theta0)
    require(param.theta0->shape() == param.theta.shape(), ErrorCode::shape_mismatch,
            "theta0 of '" + name + "' has a different shape than theta");
  order_.push_back(name);
  params_.emplace(std::move(name), std::move(param));
}

const MixParam& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  require(it != params_.end(), ErrorCode::invalid_argument, "no parameter named '" + name + "'");
  return it->second;
}

MixParam& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  require(it != params_.end(), ErrorCode::invalid_argument, "no parameter named '" + name + "'");
  return it->second;
}

const MixParam* ParamStore::find(const std::string& name) const {
  auto it = params_.find(name);
  return it == params_.end() ? nullptr : &it->second;
}

MixParam* ParamStore::find(const std::string& name) {
  auto it = params_.find(name);
  return it == params_.end() ? nullptr : &it->second;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p.theta.size();
  return n;
}

TensorMap ParamStore::thetas() const {
  TensorMap out;
  for (const auto& [name, p] : params_) out.emplace(name, p.theta);
  return out;
}

bool ParamStore::operator==(const ParamStore& other) const {
  if (order_ != other.order_) return false;
  for (const auto& name : order_) {
    const auto& a = at(name);
    const auto& b = other.at(name);
    if (!equal_exact(a.theta, b.theta) || a.theta0.has_value() != b.theta0.has_value()) return false;
    if (a.theta0 && !equal_exact(*a.theta0, *b.theta0)) return false;
    if (a.kind != b.kind || a.layer != b.layer || a.granularity != b.granularity || a.head != b.head ||
        a.eligible != b.eligible || a.trainable != b.trainable)
      return false;
  }
  return true;
}

bool identical(const ParamStore& a, const ParamStore& b) {
  if (!(a == b)) return false;
  for (const auto& name : a.names()) {
    const auto& pa = a.at(name);
    const auto& pb = b.at(name);
    if (!identical(pa.theta, pb.theta)) return false;
    if (pa.theta0 && !identical(*pa.theta0, *pb.theta0)) return false;
  }
  return true;
}

namespace {

std::size_t fan_in(const ParamInfo& weight) {
  std::size_t n = 1;
  for (std::size_t i = 1; i < weight.shape.size(); ++i) n *= weight.shape[i];
  return n;
}

// Body weights and biases: U(-1/sqrt(fan_in), 1/sqrt(fan_in)). Head: small
// uniform weights, zero bias.
Tensor init_param(const ParamInfo& info, std::size_t layer_fan_in, RngStream stream, DType dtype) {
  Tensor t(info.shape, dtype);
  double bound = 1.0 / std::sqrt(static_cast<double>(layer_fan_in));
  switch (info.kind) {
    case ParamKind::norm_scale:
      return Tensor::ones(info.shape, dtype);
    case ParamKind::norm_shift:
    case ParamKind::adapter:
      return t;
    case ParamKind::dense_weight:
      if (info.head) bound = 0.01;
      break;
    case ParamKind::conv_weight:
      break;
    case ParamKind::dense_bias:
    case ParamKind::conv_bias:
      if (info.head) return t;
      break;
  }
  for (auto& v : t.data()) v = stream.uniform(-bound, bound);
  t.finalize("init");
  return t;
}

MixParam make_param(const ParamInfo& info, Tensor theta) {
  MixParam p;
  p.theta = std::move(theta);
  p.kind = info.kind;
  p.layer = info.layer;
  p.granularity = info.granularity;
  p.head = info.head;
  p.eligible = info.eligible;
  return p;
}

std::map<std::string, std::size_t> layer_fan_in(const std::vector<ParamInfo>& layout) {
  std::map<std::string, std::size_t> out;
  for (const auto& info : layout)
    if (info.kind == ParamKind::dense_weight || info.kind == ParamKind::conv_weight) out[info.layer] = fan_in(info);
  return out;
}

}  // namespace

ParamStore build_model(const ModelSpec& spec, RngStream stream, DType dtype) {
  ParamStore store;
  const auto layout = param_layout(spec);
  const auto fans = layer_fan_in(layout);
  for (const auto& info : layout) {
    auto it = fans.find(info.layer);
    const std::size_t fan = it == fans.end() ? 1 : it->second;
    store.add(info.name, make_param(info, init_param(info, fan, stream.derive(info.name), dtype)));
  }
  return store;
}

void reset_head(ParamStore& store, const ModelSpec& spec, RngStream stream) {
  const auto layout = param_layout(spec);
  const auto fans = layer_fan_in(layout);
  for (const auto& info : layout) {
    if (!info.head) continue;
    MixParam& p = store.at(info.name);
    p.theta = init_param(info, fans.at(info.layer), stream.derive(info.name), p.theta.dtype());
    p.theta0.reset();
  }
}

void adopt_pretrained(ParamStore& store) {
  for (const auto& name : store.names())
    require(!store.at(name).theta0.has_value(), ErrorCode::state,
            "adopt_pretrained: reference weights already set for '" + name + "'");
  for (const auto& name : store.names()) {
    MixParam& p = store.at(name);
    if (p.eligible && !p.head) p.theta0 = p.theta;
  }
}

namespace {

Var activate(Var x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return relu(x);
    case Activation::tanh: return tanh(x);
    case Activation::gelu: return gelu(x);
  }
  return x;
}

class Binder {
 public:
  explicit Binder(const VarMap& params) : params_(params) {}
  Var operator()(const std::string& name) const {
    auto it = params_.find(name);
    require(it != params_.end(), ErrorCode::invalid_argument, "forward: parameter '" + name + "' is not bound");
    return it->second;
  }
  std::optional<Var> optional(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) return std::nullopt;
    return it->second;
  }

 private:
  const VarMap& params_;
};

RngStream& dropout_stream(const ForwardOptions& o) {
  require(o.dropout_stream != nullptr, ErrorCode::invalid_argument,
          "training forward with dropout needs a dropout stream");
  return *o.dropout_stream;
}

Var maybe_dropout(Var x, double rate, const ForwardOptions& o) {
  if (!o.training || rate == 0.0) return x;
  return dropout_forward(x, rate, dropout_stream(o), true);
}

}  // namespace

Var forward_graph(Graph& graph, const ModelSpec& spec, const VarMap& params, Var x, const ForwardOptions& options) {
  spec.validate();
  const Binder P(params);
  const Shape& xs = x.shape();
  require(xs.size() >= 2, ErrorCode::shape_mismatch, "forward: input needs a batch axis, got " + shape_str(xs));
  const std::size_t batch = xs[0];
  require(numel(xs) == batch * spec.input_size(), ErrorCode::shape_mismatch,
          "forward: input " + shape_str(xs) + " does not match " + std::to_string(spec.input_size()) +
              " features per sample");
  (void)graph;

  switch (spec.arch) {
    case Arch::linear: {
      Var h = reshape(x, {batch, spec.input_dim});
      return activate(linear(h, P("linear.weight"), P.optional("linear.bias")), spec.activation);
    }
    case Arch::mlp: {
      Var h = reshape(x, {batch, spec.input_dim});
      for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
        const std::string layer = "fc" + std::to_string(i);
        h = activate(linear(h, P(layer + ".weight"), P(layer + ".bias")), spec.activation);
        h = maybe_dropout(h, spec.hidden_dropout, options);
      }
      h = maybe_dropout(h, spec.classifier_dropout, options);
      return linear(h, P("head.weight"), P("head.bias"));
    }
    case Arch::micro_cnn: {
      Var h = reshape(x, {batch, spec.in_channels, spec.image_size, spec.image_size});
      for (std::size_t i = 0; i < 2; ++i) {
        const std::string layer = "conv" + std::to_string(i);
        h = activate(conv2d(h, P(layer + ".weight"), P(layer + ".bias"), 1, 1), spec.activation);
        if (options.training && spec.dropfilter_rate > 0.0)
          h = dropfilter_forward(h, spec.dropfilter_rate, dropout_stream(options), true);
        if (i == 0) h = max_pool2d(h, 2);
      }
      h = global_avg_pool(h);
      h = maybe_dropout(h, spec.classifier_dropout, options);
      return linear(h, P("head.weight"), P("head.bias"));
    }
    case Arch::micro_attn: {
      const std::size_t T = spec.tokens, D = spec.dim;
      Var tok = reshape(x, {batch * T, D});
      auto proj = [&](const char* name) {
        const std::string layer = std::string("attn.") + name;
        return linear(tok, P(layer + ".weight"), P(layer + ".bias"));
      };
      Var q = reshape(proj("q"), {batch, T, D});
      Var k = reshape(proj("k"), {batch, T, D});
      Var v = reshape(proj("v"), {batch, T, D});
      Var att = softmax_last(scale(bmm(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(D))));
      if (options.attention_out) options.attention_out->push_back(att.value());
      Var ctx = reshape(bmm(att, v), {batch * T, D});
      Var o = linear(ctx, P("attn.o.weight"), P("attn.o.bias"));
      Var h = layer_norm(add(tok, o), P("ln1.scale"), P("ln1.shift"));
      Var m = activate(linear(h, P("mlp.fc0.weight"), P("mlp.fc0.bias")), spec.activation);
      m = maybe_dropout(m, spec.hidden_dropout, options);
      m = linear(m, P("mlp.fc1.weight"), P("mlp.fc1.bias"));
      Var h2 = layer_norm(add(h, m), P("ln2.scale"), P("ln2.shift"));
      Var pooled = mean_tokens(reshape(h2, {batch, T, D}));
      pooled = maybe_dropout(pooled, spec.classifier_dropout, options);
      return linear(pooled, P("head.weight"), P("head.bias"));
    }
  }
  fail(ErrorCode::invalid_argument, "forward: unknown architecture");
}

Tensor forward(const ParamStore& store, const ModelSpec& spec, const Tensor& x, const TensorMap* overrides,
               std::optional<DType> dtype) {
  DType dt = dtype.value_or(store.size() ? store.at(store.names().front()).theta.dtype() : DType::f32);
  Graph g(dt);
  VarMap bound = bind_constants(g, store, overrides);
  Var logits = forward_graph(g, spec, bound, g.constant(x));
  return logits.value();
}

VarMap bind_constants(Graph& graph, const ParamStore& store, const TensorMap* overrides) {
  VarMap bound;
  for (const auto& name : store.names()) {
    const Tensor* value = &store.at(name).theta;
    if (overrides) {
      auto it = overrides->find(name);
      if (it != overrides->end()) {
        require(it->second.shape() == value->shape(), ErrorCode::shape_mismatch,
                "override for '" + name + "' has shape " + shape_str(it->second.shape()));
        value = &it->second;
      }
    }
    bound.emplace(name, graph.constant(*value));
  }
  fold_adapters(bound, store);
  return bound;
}

void fold_adapters(VarMap& params, const ParamStore& store) {
  for (const auto& name : store.names()) {
    const MixParam& p = store.at(name);
    if (p.kind != ParamKind::dense_weight) continue;
    auto a = params.find(p.layer + ".lora_A");
    auto b = params.find(p.layer + ".lora_B");
    if (a == params.end() || b == params.end()) continue;
    params[name] = add(params.at(name), matmul(a->second, b->second));
  }
}

std::vector<int> argmax_rows(const Tensor& logits) {
  require(logits.rank() == 2, ErrorCode::shape_mismatch, "argmax_rows expects [N,C]");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[r * c + j] > logits[r * c + best]) best = j;
    out[r] = static_cast<int>(best);
  }
  return out;
}

}  // namespace mixlab
