// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/verify.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>

#include <unistd.h>

#include "mixlab/checkpoint.hpp"
#include "mixlab/config.hpp"
#include "mixlab/cost_model.hpp"
#include "mixlab/regularizers.hpp"

namespace mixlab {

bool VerifyReport::passed() const {
  for (const auto& c : checks)
    if (!c.passed) return false;
  return true;
}

namespace {

ModelSpec small_mlp(Granularity g = Granularity::element) {
  ModelSpec s;
  s.arch = Arch::mlp;
  s.input_dim = 5;
  s.hidden = {4};
  s.classes = 3;
  s.mix_biases = true;
  s.dense_granularity = g;
  return s;
}

ModelSpec small_cnn() {
  ModelSpec s;
  s.arch = Arch::micro_cnn;
  s.in_channels = 1;
  s.image_size = 6;
  s.conv_channels = {2, 3};
  s.classes = 2;
  s.mix_biases = true;
  return s;
}

// Pretrained store with theta moved away from theta0.
ParamStore fine_tuned_store(const ModelSpec& spec, std::uint64_t seed) {
  ParamStore store = build_model(spec, RngStream(seed, "verify/model"), DType::f64);
  adopt_pretrained(store);
  RngStream jitter(seed, "verify/jitter");
  for (const auto& name : store.names())
    for (double& v : store.at(name).theta.data()) v += 0.3 * jitter.normal();
  return store;
}

Batch random_batch(const ModelSpec& spec, std::size_t rows, std::uint64_t seed) {
  RngStream s(seed, "verify/batch");
  Shape shape{rows};
  if (spec.arch == Arch::micro_cnn) {
    shape.insert(shape.end(), {spec.in_channels, spec.image_size, spec.image_size});
  } else {
    shape.push_back(spec.input_size());
  }
  Batch b{Tensor(shape, DType::f64), {}};
  for (double& v : b.x.data()) v = s.normal();
  for (std::size_t i = 0; i < rows; ++i) b.y.push_back(static_cast<int>(i % spec.classes));
  return b;
}

double cross_entropy_of(const Tensor& logits, const std::vector<int>& y) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, logits[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(logits[i * c + j] - mx);
    total += mx + std::log(z) - logits[i * c + static_cast<std::size_t>(y[i])];
  }
  return total / static_cast<double>(n);
}

std::string num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

VerifyCheck check_costs() {
  const auto r = resnet50_profile(), v = vit_s16_profile();
  const double e_r = erm_cost(r).total_gflops, e_v = erm_cost(v).total_gflops;
  const auto m8 = mixout_cost(r, 0.8), m9 = mixout_cost(v, 0.9);
  const auto l = lora_cost(v, 64);
  const bool ok = std::abs(e_r - 12.3) < 1e-9 && std::abs(e_v - 13.8) < 1e-9 &&
                  std::abs(m8.cost_t_ratio - 0.733) < 0.015 && std::abs(m9.cost_t_ratio - 0.700) < 0.015 &&
                  std::abs(m9.backward_reduction - 0.45) < 1e-9 && std::abs(m9.grad_mem_fraction - 0.1) < 1e-9 &&
                  std::abs(l.adapter_fwd_gflops - 1.04) < 0.005 && std::abs(l.fwd_gflops - 5.64) < 0.005 &&
                  std::abs(l.total_gflops - 6.68) < 0.005 && std::abs(l.cost_t_ratio - 0.48) < 0.005;
  return {"cost.reference_numbers", ok,
          "erm " + num(e_r) + "/" + num(e_v) + " GF, mixout " + num(m8.cost_t_ratio) + "/" + num(m9.cost_t_ratio) +
              ", lora total " + num(l.total_gflops)};
}

VerifyCheck check_gradients(const ModelSpec& spec, const char* name) {
  ParamStore store = fine_tuned_store(spec, 11);
  const Batch batch = random_batch(spec, 6, 12);
  MixoutConfig cfg;
  cfg.swap_rate = 0.5;
  cfg.seed = 3;
  const MaskRealization mask = sample_mask(cfg, store, 0);
  const ParamStore before = store;
  Optimizer opt(OptimizerConfig{OptimizerKind::sgd, 1e-3});
  TrainStepReport report;
  TrainStepOptions o;
  o.fixed_mask = &mask;
  o.dtype = DType::f64;
  o.report = &report;
  train_step(store, spec, batch, &cfg, opt, 0, o);

  double worst = 0.0;
  bool gated_zero = true;
  for (const auto& pname : before.names()) {
    const Tensor& g = report.grads.at(pname);
    auto loss = [&](const Tensor& t) {
      ParamStore s = before;
      s.at(pname).theta = t;
      const TensorMap over = subnetwork_params(s, cfg, mask);
      return cross_entropy_of(forward(s, spec, batch.x, &over, DType::f64), batch.y);
    };
    const Tensor fd = finite_diff_grad(loss, before.at(pname).theta, 1e-6);
    worst = std::max(worst, max_abs_diff(g, fd) / std::max(1e-3, l2_norm(fd)));
    if (auto it = mask.masks.find(pname); it != mask.masks.end()) {
      const Tensor e = it->second.expanded();
      for (std::size_t i = 0; i < e.size(); ++i)
        if (e[i] == 0.0 && g[i] != 0.0) gated_zero = false;
    }
  }
  return {std::string("mixout.gradients_") + name, gated_zero && worst < 1e-4,
          "max relative error " + num(worst) + (gated_zero ? "" : ", swapped entry with nonzero gradient")};
}

VerifyCheck check_limits() {
  const ModelSpec spec = small_mlp();
  const Batch batch = random_batch(spec, 8, 5);
  ParamStore a = fine_tuned_store(spec, 21), b = a;
  ParamStore c = build_model(spec, RngStream(21, "verify/model"), DType::f64);
  adopt_pretrained(c);
  Optimizer oa, ob, oc;
  MixoutConfig zero;
  zero.swap_rate = 0.0;
  MixoutConfig one;
  one.swap_rate = 1.0;
  one.scaling_mode = ScalingMode::raw;
  for (std::int64_t step = 0; step < 5; ++step) {
    train_step(a, spec, batch, &zero, oa, step);
    train_step(b, spec, batch, nullptr, ob, step);
    train_step(c, spec, batch, &one, oc, step);
  }
  bool pinned = true;
  for (const auto& name : c.names()) {
    const MixParam& p = c.at(name);
    if (p.eligible && !identical(p.theta, *p.theta0)) pinned = false;
  }
  const bool same = identical(a, b);
  return {"mixout.swap_rate_limits", same && pinned,
          std::string(same ? "" : "s=0 diverged from plain fine-tuning ") + (pinned ? "" : "s=1 moved a parameter")};
}

VerifyCheck check_structure() {
  std::size_t bad = 0, draws = 0;
  for (const ModelSpec& spec : {small_cnn(), small_mlp(Granularity::neuron)}) {
    const ParamStore store = fine_tuned_store(spec, 31);
    MixoutConfig cfg;
    cfg.swap_rate = 0.5;
    for (std::int64_t step = 0; step < 200; ++step) {
      const auto m = sample_mask(cfg, store, step);
      for (const auto& [name, entry] : m.masks) {
        if (entry.granularity == Granularity::element) continue;
        ++draws;
        const Tensor e = entry.expanded();
        const std::size_t per = e.size() / entry.param_shape[0];
        for (std::size_t u = 0; u < entry.param_shape[0]; ++u)
          for (std::size_t i = 1; i < per; ++i)
            if (e[u * per + i] != e[u * per]) {
              ++bad;
              u = entry.param_shape[0];
              break;
            }
      }
    }
  }
  return {"mixout.structured_masks", bad == 0 && draws > 0,
          std::to_string(bad) + " of " + std::to_string(draws) + " structured draws vary within a unit"};
}

VerifyCheck check_scaling() {
  const ModelSpec spec = small_mlp();
  const ParamStore store = fine_tuned_store(spec, 41);
  double worst = 0.0;
  for (double s : {0.1, 0.5, 0.9}) {
    MixoutConfig cfg;
    cfg.swap_rate = s;
    cfg.scaling_mode = ScalingMode::eval_expected;
    const double k = cfg.keep();
    for (const auto& [name, bar] : expected_params(store, cfg)) {
      const MixParam& p = store.at(name);
      for (std::size_t i = 0; i < bar.size(); ++i)
        worst = std::max(worst, std::abs((bar[i] - (1.0 - k) * (*p.theta0)[i]) / k - p.theta[i]));
    }
  }
  return {"mixout.scaling_identity", worst <= 1e-12, "max deviation " + num(worst)};
}

VerifyCheck check_baselines() {
  std::string issues;
  // Dyadic weights and inputs keep every sum exact, so both averages agree bitwise.
  ModelSpec lin;
  lin.arch = Arch::linear;
  lin.input_dim = 3;
  lin.classes = 2;
  lin.activation = Activation::identity;
  std::vector<ParamStore> members;
  RngStream rs(51, "verify/dyadic");
  for (int m = 0; m < 4; ++m) {
    ParamStore s = build_model(lin, rs.derive("m" + std::to_string(m)), DType::f64);
    for (const auto& name : s.names())
      for (double& v : s.at(name).theta.data()) v = static_cast<double>(static_cast<int>(rs.below(33)) - 16) / 8.0;
    members.push_back(std::move(s));
  }
  Tensor x({4, 3}, DType::f64);
  for (double& v : x.data()) v = static_cast<double>(static_cast<int>(rs.below(17)) - 8) / 4.0;
  if (!equal_exact(deep_ensemble_predict(members, lin, x), forward(weight_average(members), lin, x, nullptr, DType::f64)))
    issues += " weight-average";

  const ModelSpec spec = small_mlp();
  ParamStore base = fine_tuned_store(spec, 52);
  ParamStore wrapped = lora_wrap(base, spec, 2, RngStream(52, "verify/lora"));
  RngStream ra(53, "verify/lora_a");
  for (const auto& name : wrapped.names())
    if (wrapped.at(name).kind == ParamKind::adapter)
      for (double& v : wrapped.at(name).theta.data()) v = 0.2 * ra.normal();
  const Batch batch = random_batch(spec, 5, 54);
  const double lora_gap = max_abs_diff(forward(wrapped, spec, batch.x, nullptr, DType::f64),
                                       forward(lora_merge(wrapped), spec, batch.x, nullptr, DType::f64));
  if (!(lora_gap <= 1e-6)) issues += " lora-merge(" + num(lora_gap) + ")";

  RngStream rd(55, "verify/dropout");
  Tensor img({2, 3, 4, 4}, DType::f64);
  for (double& v : img.data()) v = rd.normal();
  if (!identical(dropout_forward(img, 0.0, rd, true), img) || !identical(dropfilter_forward(img, 0.0, rd, true), img))
    issues += " dropout-identity";

  const TensorMap g = l2sp_gradient(base, 0.3);
  for (const auto& [name, gt] : g) {
    auto f = [&](const Tensor& t) {
      ParamStore s = base;
      s.at(name).theta = t;
      return l2sp_penalty(s, 0.3);
    };
    const Tensor fd = finite_diff_grad(f, base.at(name).theta, 1e-5);
    if (max_abs_diff(gt, fd) > 1e-6 * std::max(1.0, l2_norm(fd))) issues += " l2sp(" + name + ")";
  }

  MixoutConfig fixed;
  fixed.swap_rate = kFixedMixoutDefaultRate;
  fixed.scaling_mode = ScalingMode::eval_expected;
  ParamStore store = base;
  const MaskRealization mask = fixed_mixout_masks(fixed, store, RngStream(56, "verify/fixed"));
  Optimizer opt;
  TrainStepOptions o;
  o.fixed_mask = &mask;
  for (std::int64_t step = 0; step < 4; ++step) train_step(store, spec, random_batch(spec, 6, 60 + step), &fixed, opt, step, o);
  for (const auto& [name, entry] : mask.masks) {
    const Tensor e = entry.expanded();
    const Tensor& now = store.at(name).theta;
    const Tensor& was = base.at(name).theta;
    for (std::size_t i = 0; i < e.size(); ++i)
      if (e[i] == 0.0 && now[i] != was[i]) {
        issues += " fixed-mask(" + name + ")";
        break;
      }
  }
  return {"regularizers.baselines", issues.empty(), issues.empty() ? "ok" : "failed:" + issues};
}

VerifyCheck check_checkpoint() {
  const ModelSpec spec = small_cnn();
  const ParamStore store = fine_tuned_store(spec, 71);
  const auto path = std::filesystem::temp_directory_path() /
                    ("mixlab_verify_" + std::to_string(::getpid()) + ".ckpt");
  save_checkpoint(store, spec, path.string(), 71, 9);
  const Checkpoint back = load_checkpoint(path.string(), spec);
  std::filesystem::remove(path);
  const bool ok = identical(back.store, store) && back.spec == spec && back.seed == 71 && back.step == 9;
  return {"checkpoint.round_trip", ok, ok ? "bitwise" : "mismatch after reload"};
}

VerifyCheck check_config_echo() {
  const ExperimentConfig c = parse_config_text("benchmark = rotated_clusters\nmethod = mixout\nseeds = 1, 2\n");
  const std::string once = resolved_config_text(c);
  const std::string twice = resolved_config_text(parse_config_text(once));
  bool rejects = false;
  try {
    parse_config_text("benchmark = rotated_clusters\nmethod = erm\nseeds = 1\nmethd = erm\n");
  } catch (const MixlabError& e) {
    rejects = e.code() == ErrorCode::config;
  }
  return {"config.echo", once == twice && rejects, once == twice ? "stable" : "echo changes on re-parse"};
}

}  // namespace

VerifyReport run_verify(const std::function<void(const VerifyCheck&)>& on_check) {
  VerifyReport report;
  const std::vector<std::function<VerifyCheck()>> checks{
      check_costs,
      [] { return check_gradients(small_mlp(), "mlp"); },
      [] { return check_gradients(small_cnn(), "cnn"); },
      check_limits,
      check_structure,
      check_scaling,
      check_baselines,
      check_checkpoint,
      check_config_echo,
  };
  for (std::size_t i = 0; i < checks.size(); ++i) {
    VerifyCheck c;
    try {
      c = checks[i]();
    } catch (const std::exception& e) {
      c = {"check" + std::to_string(i), false, std::string("threw: ") + e.what()};
    }
    if (on_check) on_check(c);
    report.checks.push_back(std::move(c));
  }
  return report;
}

}  // namespace mixlab
