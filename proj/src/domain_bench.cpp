// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/domain_bench.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>

namespace mixlab {

const char* to_string(Generator g) {
  switch (g) {
    case Generator::rotated_clusters: return "rotated_clusters";
    case Generator::spurious_channel: return "spurious_channel";
    case Generator::textured_shapes: return "textured_shapes";
  }
  return "?";
}

Generator parse_generator(const std::string& s) {
  if (s == "rotated_clusters") return Generator::rotated_clusters;
  if (s == "spurious_channel") return Generator::spurious_channel;
  if (s == "textured_shapes") return Generator::textured_shapes;
  fail(ErrorCode::invalid_argument, "unknown generator '" + s + "'");
}

std::size_t DomainSpec::input_size() const {
  switch (generator) {
    case Generator::rotated_clusters: return core_dim;
    case Generator::spurious_channel: return core_dim + spurious_dim;
    case Generator::textured_shapes: return image_size * image_size;
  }
  return 0;
}

Shape DomainSpec::sample_shape() const {
  if (generator == Generator::textured_shapes) return {1, image_size, image_size};
  return {input_size()};
}

void DomainSpec::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorCode::invalid_argument, "domain spec: " + m); };
  if (classes < 2) bad("needs at least two classes");
  if (samples_per_domain < classes) bad("fewer samples than classes");
  if (!(noise >= 0.0)) bad("noise must be >= 0");
  switch (generator) {
    case Generator::rotated_clusters:
      if (core_dim < 2 || core_dim % 2 != 0) bad("rotated_clusters needs an even core_dim >= 2");
      break;
    case Generator::spurious_channel:
      if (core_dim == 0 || spurious_dim == 0) bad("spurious_channel needs core_dim and spurious_dim > 0");
      for (double r : domain_params)
        if (r < -1.0 || r > 1.0) bad("spurious correlation must lie in [-1,1]");
      break;
    case Generator::textured_shapes:
      if (image_size < 8 || image_size % 2 != 0) bad("textured_shapes needs an even image_size >= 8");
      if (classes > 4) bad("textured_shapes has four shapes");
      for (double t : domain_params)
        if (t < 0.0 || t > 3.0 || t != std::floor(t)) bad("texture ids are 0..3");
      break;
  }
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
  Shape shape = x.shape();
  shape[0] = rows.size();
  const std::size_t per = x.size() / std::max<std::size_t>(x.dim(0), 1);
  Dataset out;
  out.x = Tensor(shape, x.dtype());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * per), per,
                out.x.data().begin() + static_cast<std::ptrdiff_t>(r * per));
    out.y.push_back(y[rows[r]]);
    out.domain.push_back(domain[rows[r]]);
  }
  return out;
}

Dataset concat(const std::vector<const Dataset*>& parts) {
  require(!parts.empty(), ErrorCode::invalid_argument, "concat of no datasets");
  Shape shape = parts.front()->x.shape();
  std::size_t rows = 0;
  for (const auto* p : parts) {
    Shape s = p->x.shape();
    s[0] = shape[0];
    require(s == shape, ErrorCode::shape_mismatch, "concat: sample shapes differ");
    rows += p->size();
  }
  shape[0] = rows;
  std::vector<double> data;
  data.reserve(numel(shape));
  Dataset out;
  for (const auto* p : parts) {
    data.insert(data.end(), p->x.data().begin(), p->x.data().end());
    out.y.insert(out.y.end(), p->y.begin(), p->y.end());
    out.domain.insert(out.domain.end(), p->domain.begin(), p->domain.end());
  }
  out.x = Tensor(shape, std::move(data), parts.front()->x.dtype());
  return out;
}

namespace {

struct Prototypes {
  std::vector<std::vector<double>> core;
  std::vector<std::vector<double>> spurious;
};

Prototypes prototypes(const DomainSpec& spec) {
  RngStream s(spec.mechanism_seed, std::string("prototypes/") + to_string(spec.generator));
  Prototypes p;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    std::vector<double> v(spec.core_dim);
    for (auto& e : v) e = s.normal();
    p.core.push_back(std::move(v));
  }
  for (std::size_t c = 0; c < spec.classes; ++c) {
    std::vector<double> v(spec.spurious_dim);
    for (auto& e : v) e = s.normal() * 2.0;
    p.spurious.push_back(std::move(v));
  }
  return p;
}

void rotated_sample(const DomainSpec& spec, const Prototypes& p, int label, double degrees, RngStream& s,
                    double* out) {
  const double a = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(a), sn = std::sin(a);
  for (std::size_t i = 0; i + 1 < spec.core_dim; i += 2) {
    const double u = p.core[label][i] + spec.noise * s.normal();
    const double v = p.core[label][i + 1] + spec.noise * s.normal();
    out[i] = c * u - sn * v;
    out[i + 1] = sn * u + c * v;
  }
}

// The nuisance channel shows the prototype of `label` with probability |rho|
// (rho > 0), of the next class (rho < 0), and of a uniformly random class
// otherwise.
void spurious_sample(const DomainSpec& spec, const Prototypes& p, int label, double rho, RngStream& s, double* out) {
  for (std::size_t i = 0; i < spec.core_dim; ++i) out[i] = p.core[label][i] + spec.noise * s.normal();
  const int classes = static_cast<int>(spec.classes);
  int shown = static_cast<int>(s.below(spec.classes));
  if (s.uniform() < std::abs(rho)) shown = rho >= 0.0 ? label : (label + 1) % classes;
  for (std::size_t i = 0; i < spec.spurious_dim; ++i)
    out[spec.core_dim + i] = p.spurious[shown][i] + 0.1 * s.normal();
}

struct Texture {
  enum Kind { stripes, checker, dots, blank } kind = blank;
  double angle = 0.0;
  double period = 4.0;
  double phase = 0.0;
  std::size_t cell = 2;
  double density = 0.3;
};

Texture domain_texture(int id) {
  Texture t;
  switch (id) {
    case 0: t.kind = Texture::stripes; t.angle = 0.0; t.period = 4.0; break;
    case 1: t.kind = Texture::stripes; t.angle = 90.0; t.period = 4.0; break;
    case 2: t.kind = Texture::checker; t.cell = 2; break;
    default: t.kind = Texture::dots; t.density = 0.3; break;
  }
  return t;
}

Texture random_texture(RngStream& s) {
  Texture t;
  switch (s.below(4)) {
    case 0:
      t.kind = Texture::stripes;
      t.angle = s.uniform(0.0, 180.0);
      t.period = s.uniform(3.0, 6.0);
      t.phase = s.uniform(0.0, 2.0 * std::numbers::pi);
      break;
    case 1: t.kind = Texture::checker; t.cell = 1 + s.below(3); break;
    case 2: t.kind = Texture::dots; t.density = s.uniform(0.1, 0.4); break;
    default: t.kind = Texture::blank; break;
  }
  return t;
}

// A bar of length ~10 and width 2 whose orientation is the class:
// horizontal, vertical, diagonal, anti-diagonal.
void shape_sample(const DomainSpec& spec, int label, const Texture& tex, RngStream& s, double* out) {
  const std::size_t n = spec.image_size;
  const double amp = 0.6;
  const double a = tex.angle * std::numbers::pi / 180.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double b = 0.0;
      switch (tex.kind) {
        case Texture::stripes:
          b = 0.5 * (1.0 + std::sin(2.0 * std::numbers::pi * (i * std::cos(a) + j * std::sin(a)) / tex.period +
                                    tex.phase));
          break;
        case Texture::checker: b = ((i / tex.cell + j / tex.cell) % 2) ? 1.0 : 0.0; break;
        case Texture::dots: b = s.uniform() < tex.density ? 1.0 : 0.0; break;
        case Texture::blank: break;
      }
      out[i * n + j] = amp * b + 0.15 * spec.noise * s.normal();
    }
  const double half = static_cast<double>(n) / 2.0;
  const double ci = half - 0.5 + s.uniform(-2.0, 2.0);
  const double cj = half - 0.5 + s.uniform(-2.0, 2.0);
  const double len = static_cast<double>(n) * 0.3 + s.uniform(-1.0, 1.0);
  static constexpr double dir[4][2] = {{0.0, 1.0}, {1.0, 0.0}, {0.7071067811865476, 0.7071067811865476},
                                       {0.7071067811865476, -0.7071067811865476}};
  const double di = dir[label % 4][0], dj = dir[label % 4][1];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double pi_ = static_cast<double>(i) - ci, pj = static_cast<double>(j) - cj;
      const double along = pi_ * di + pj * dj;
      const double across = std::abs(pi_ * dj - pj * di);
      if (std::abs(along) <= len && across <= 1.0) out[i * n + j] = 1.5 + 0.15 * spec.noise * s.normal();
    }
}

std::vector<int> balanced_labels(std::size_t n, std::size_t classes, RngStream& s) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % classes);
  for (std::size_t i = n; i > 1; --i) std::swap(y[i - 1], y[s.below(i)]);
  return y;
}

Dataset make(const DomainSpec& spec, std::size_t n, int tag, RngStream& s,
             const std::function<void(int, RngStream&, double*)>& sample) {
  Shape shape{n};
  for (auto e : spec.sample_shape()) shape.push_back(e);
  Dataset d;
  d.y = balanced_labels(n, spec.classes, s);
  d.domain.assign(n, tag);
  std::vector<double> data(numel(shape));
  const std::size_t per = spec.input_size();
  for (std::size_t i = 0; i < n; ++i) sample(d.y[i], s, data.data() + i * per);
  d.x = Tensor(shape, std::move(data), DType::f32);
  return d;
}

}  // namespace

Dataset generate_domain(const DomainSpec& spec, std::size_t domain_index, RngStream stream) {
  spec.validate();
  require(domain_index < spec.domains(), ErrorCode::invalid_argument,
          "domain index " + std::to_string(domain_index) + " out of range");
  const Prototypes p = prototypes(spec);
  const double param = spec.domain_params[domain_index];
  RngStream s = stream.derive("domain" + std::to_string(domain_index));
  const int tag = static_cast<int>(domain_index);
  switch (spec.generator) {
    case Generator::rotated_clusters:
      return make(spec, spec.samples_per_domain, tag, s,
                  [&](int y, RngStream& r, double* out) { rotated_sample(spec, p, y, param, r, out); });
    case Generator::spurious_channel:
      return make(spec, spec.samples_per_domain, tag, s,
                  [&](int y, RngStream& r, double* out) { spurious_sample(spec, p, y, param, r, out); });
    case Generator::textured_shapes: {
      const Texture tex = domain_texture(static_cast<int>(param));
      return make(spec, spec.samples_per_domain, tag, s,
                  [&](int y, RngStream& r, double* out) { shape_sample(spec, y, tex, r, out); });
    }
  }
  fail(ErrorCode::invalid_argument, "unknown generator");
}

Dataset generate_pretrain_mixture(const DomainSpec& spec, std::size_t samples, RngStream stream) {
  spec.validate();
  const Prototypes p = prototypes(spec);
  RngStream s = stream.derive("pretrain");
  switch (spec.generator) {
    case Generator::rotated_clusters:
      return make(spec, samples, -1, s, [&](int y, RngStream& r, double* out) {
        rotated_sample(spec, p, y, r.uniform(-60.0, 150.0), r, out);
      });
    case Generator::spurious_channel:
      return make(spec, samples, -1, s,
                  [&](int y, RngStream& r, double* out) { spurious_sample(spec, p, y, 0.0, r, out); });
    case Generator::textured_shapes:
      return make(spec, samples, -1, s, [&](int y, RngStream& r, double* out) {
        const Texture tex = random_texture(r);
        shape_sample(spec, y, tex, r, out);
      });
  }
  fail(ErrorCode::invalid_argument, "unknown generator");
}

std::pair<Dataset, Dataset> split(const Dataset& data, double fraction, RngStream stream) {
  require(fraction > 0.0 && fraction < 1.0, ErrorCode::invalid_argument, "split fraction must lie in (0,1)");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.y[i]].push_back(i);
  std::vector<std::size_t> first, second;
  for (auto& [label, rows] : by_class) {
    RngStream s = stream.derive("class" + std::to_string(label));
    for (std::size_t i = rows.size(); i > 1; --i) std::swap(rows[i - 1], rows[s.below(i)]);
    const auto take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(rows.size())));
    first.insert(first.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(take));
    second.insert(second.end(), rows.begin() + static_cast<std::ptrdiff_t>(take), rows.end());
  }
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  require(!first.empty() && !second.empty(), ErrorCode::invalid_argument, "degenerate split");
  return {data.subset(first), data.subset(second)};
}

Batch sample_batch(const Dataset& data, std::size_t rows, RngStream& stream) {
  require(data.size() > 0, ErrorCode::invalid_argument, "cannot sample from an empty dataset");
  std::vector<std::size_t> idx(rows);
  for (auto& i : idx) i = stream.below(data.size());
  Dataset d = data.subset(idx);
  return {std::move(d.x), std::move(d.y)};
}

Batch whole(const Dataset& data) { return {data.x, data.y}; }

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  const auto pred = argmax_rows(logits);
  require(pred.size() == labels.size(), ErrorCode::shape_mismatch, "accuracy: prediction/label count differs");
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

PretrainResult pretrain_reference(const DomainSpec& spec, const ModelSpec& model, const PretrainConfig& config,
                                  RngStream stream) {
  require(spec.input_size() == model.input_size(), ErrorCode::shape_mismatch,
          "benchmark samples have " + std::to_string(spec.input_size()) + " features, model expects " +
              std::to_string(model.input_size()));
  PretrainResult out;
  out.store = build_model(model, stream.derive("init"));
  const Dataset data = generate_pretrain_mixture(spec, config.samples, stream.derive("data"));
  OptimizerConfig oc;
  oc.lr = config.lr;
  Optimizer opt(oc);
  RngStream batches = stream.derive("batches");
  RngStream drop = stream.derive("dropout");
  TrainStepOptions options;
  options.dropout_stream = &drop;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const Batch b = sample_batch(data, config.batch, batches);
    train_step(out.store, model, b, nullptr, opt, static_cast<std::int64_t>(step), options);
  }
  out.train_accuracy = accuracy(forward(out.store, model, data.x), data.y);
  return out;
}

double disagreement_rate(const std::vector<int>& a, const std::vector<int>& b) {
  require(a.size() == b.size(), ErrorCode::shape_mismatch,
          "disagreement_rate: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " predictions");
  if (a.empty()) return 0.0;
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += a[i] != b[i];
  return static_cast<double>(diff) / static_cast<double>(a.size());
}

double subnetwork_disagreement(const ParamStore& store, const ModelSpec& spec, const MixoutConfig& config,
                               const Tensor& x, std::size_t pairs) {
  require(pairs >= 1, ErrorCode::invalid_argument, "need at least one sub-network pair");
  MixoutConfig c = config;
  c.rng_label = config.rng_label + "/disagree";
  auto predict = [&](std::int64_t k) {
    const TensorMap params = subnetwork_params(store, c, mc_mask(c, store, k));
    return argmax_rows(forward(store, spec, x, &params));
  };
  double total = 0.0;
  for (std::size_t j = 0; j < pairs; ++j) {
    const auto k = static_cast<std::int64_t>(2 * j);
    total += disagreement_rate(predict(k), predict(k + 1));
  }
  return total / static_cast<double>(pairs);
}

McCurve mc_vs_scaling_curve(const ParamStore& store, const ModelSpec& spec, const MixoutConfig& config,
                            const Dataset& eval, const std::vector<std::int64_t>& ks) {
  McCurve curve;
  for (auto k : ks) curve.points.push_back({k, accuracy(mc_predict(store, spec, eval.x, config, k), eval.y)});
  const TensorMap scaled = inference_params(store, config);
  curve.scaling_accuracy = accuracy(forward(store, spec, eval.x, &scaled), eval.y);
  return curve;
}

}  // namespace mixlab
