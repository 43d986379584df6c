// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "mixlab/mixout.hpp"
#include "support/oracles.hpp"

using namespace mixlab;

namespace {

ModelSpec mlp(Granularity g = Granularity::element) {
  ModelSpec s;
  s.arch = Arch::mlp;
  s.input_dim = 5;
  s.hidden = {6, 4};
  s.classes = 3;
  s.mix_biases = true;
  s.dense_granularity = g;
  return s;
}

ModelSpec cnn() {
  ModelSpec s;
  s.arch = Arch::micro_cnn;
  s.image_size = 6;
  s.conv_channels = {2, 3};
  s.classes = 2;
  s.mix_biases = true;
  return s;
}

ParamStore tuned(const ModelSpec& spec, std::uint64_t seed, DType dt) {
  ParamStore store = build_model(spec, RngStream(seed, "test/model"), dt);
  adopt_pretrained(store);
  RngStream j(seed, "test/jitter");
  for (const auto& name : store.names())
    for (double& v : store.at(name).theta.data()) v = round_to(dt, v + 0.2 * j.normal());
  return store;
}

Batch batch_for(const ModelSpec& spec, std::size_t rows, std::uint64_t seed, DType dt) {
  RngStream s(seed, "test/batch");
  Batch b{Tensor({rows, spec.input_size()}, dt), {}};
  for (double& v : b.x.data()) v = round_to(dt, s.normal());
  for (std::size_t i = 0; i < rows; ++i) b.y.push_back(static_cast<int>(s.below(spec.classes)));
  return b;
}

TensorMap gated_grads(ParamStore store, const ModelSpec& spec, const Batch& b, const MixoutConfig& cfg,
                      const MaskRealization& mask, DType dt) {
  Optimizer opt(OptimizerConfig{OptimizerKind::sgd, 1e-3});
  TrainStepReport report;
  TrainStepOptions o;
  o.fixed_mask = &mask;
  o.dtype = dt;
  o.report = &report;
  train_step(store, spec, b, &cfg, opt, 0, o);
  return report.grads;
}

}  // namespace

struct GateCase {
  const char* name;
  bool conv;
  Granularity granularity;
  ScalingMode mode;
  DType dtype;
  double swap_rate;
};

class GatedBackward : public ::testing::TestWithParam<GateCase> {};

TEST_P(GatedBackward, MatchesUngatedAutodiffBitwise) {
  const GateCase& c = GetParam();
  const ModelSpec spec = c.conv ? cnn() : mlp(c.granularity);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const ParamStore store = tuned(spec, seed, c.dtype);
    const Batch b = batch_for(spec, 7, seed + 10, c.dtype);
    MixoutConfig cfg;
    cfg.swap_rate = c.swap_rate;
    cfg.scaling_mode = c.mode;
    cfg.seed = seed;
    const MaskRealization mask = sample_mask(cfg, store, 3);
    const TensorMap got = gated_grads(store, spec, b, cfg, mask, c.dtype);
    const TensorMap want = oracle::swap_autodiff_grads(store, spec, b, cfg, mask, c.dtype);
    for (const auto& name : store.names()) {
      const Tensor& g = got.at(name);
      const Tensor& w = want.at(name);
      ASSERT_TRUE(g.same_shape(w));
      const auto it = mask.masks.find(name);
      const Tensor xi = it == mask.masks.end() ? Tensor::ones(g.shape(), DType::f64) : it->second.expanded();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xi[i] == 0.0) {
          ASSERT_EQ(g[i], 0.0) << name << "[" << i << "]";
          ASSERT_FALSE(std::signbit(g[i])) << name << "[" << i << "]";
        }
        ASSERT_EQ(g[i], w[i]) << c.name << " " << name << "[" << i << "] seed " << seed;
      }
    }
  }
}

INSTANTIATE_TEST_SUITE_P(
    Cases, GatedBackward,
    ::testing::Values(GateCase{"mlp_f64_corrected", false, Granularity::element, ScalingMode::train_corrected, DType::f64, 0.7},
                      GateCase{"mlp_f32_corrected", false, Granularity::element, ScalingMode::train_corrected, DType::f32, 0.9},
                      GateCase{"mlp_f32_raw", false, Granularity::element, ScalingMode::raw, DType::f32, 0.5},
                      GateCase{"mlp_neuron_f64", false, Granularity::neuron, ScalingMode::train_corrected, DType::f64, 0.6},
                      GateCase{"cnn_f64_corrected", true, Granularity::filter, ScalingMode::train_corrected, DType::f64, 0.5},
                      GateCase{"cnn_f32_expected", true, Granularity::filter, ScalingMode::eval_expected, DType::f32, 0.8}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(MixoutGradients, MatchCentralDifferencesInF64) {
  for (const ModelSpec& spec : {mlp(), cnn()}) {
    const ParamStore store = tuned(spec, 4, DType::f64);
    const Batch b = batch_for(spec, 6, 5, DType::f64);
    MixoutConfig cfg;
    cfg.swap_rate = 0.6;
    const MaskRealization mask = sample_mask(cfg, store, 0);
    const TensorMap grads = gated_grads(store, spec, b, cfg, mask, DType::f64);
    for (const auto& name : store.names()) {
      auto f = [&](const std::vector<double>& v) {
        ParamStore s = store;
        s.at(name).theta = Tensor(store.at(name).theta.shape(), v, DType::f64);
        const TensorMap over = subnetwork_params(s, cfg, mask);
        return oracle::softmax_ce(forward(s, spec, b.x, &over, DType::f64), b.y);
      };
      const auto fd = oracle::central_difference(f, store.at(name).theta.vec(), 1e-6);
      EXPECT_LT(oracle::relative_error(grads.at(name).data(), fd, 1e-6), 1e-4) << name;
    }
  }
}

TEST(MixoutMasks, SampleIsPureFunctionOfSeedLabelStep) {
  const ParamStore store = tuned(mlp(), 1, DType::f32);
  MixoutConfig cfg;
  cfg.seed = 9;
  const auto a = sample_mask(cfg, store, 5);
  const auto b = sample_mask(cfg, store, 5);
  const auto c = sample_mask(cfg, store, 6);
  bool differs = false;
  for (const auto& [name, e] : a.masks) {
    EXPECT_TRUE(identical(e.units, b.masks.at(name).units));
    differs = differs || !identical(e.units, c.masks.at(name).units);
  }
  EXPECT_TRUE(differs);
  cfg.rng_label = "other";
  const auto d = sample_mask(cfg, store, 5);
  EXPECT_FALSE(identical(a.masks.at("fc0.weight").units, d.masks.at("fc0.weight").units));
}

TEST(MixoutMasks, OnlyEligibleParametersAreMasked) {
  const ParamStore store = tuned(mlp(), 1, DType::f32);
  MixoutConfig cfg;
  const auto m = sample_mask(cfg, store, 0);
  for (const auto& name : store.names()) EXPECT_EQ(m.masks.contains(name), store.at(name).eligible) << name;
  EXPECT_FALSE(m.masks.contains("head.weight"));
}

TEST(MixoutMasks, SwapFrequencyMatchesRate) {
  ModelSpec spec = mlp();
  spec.hidden = {64};
  const ParamStore store = tuned(spec, 2, DType::f32);
  for (double s : {0.1, 0.5, 0.9}) {
    MixoutConfig cfg;
    cfg.swap_rate = s;
    double swapped = 0, total = 0;
    for (std::int64_t step = 0; step < 50; ++step)
      for (const auto& [name, e] : sample_mask(cfg, store, step).masks)
        for (double v : e.units.data()) {
          swapped += v == 0.0;
          total += 1;
        }
    EXPECT_NEAR(swapped / total, s, 4 * std::sqrt(s * (1 - s) / total));
  }
}

TEST(MixoutMasks, StructuredUnitsAreConstantAndBiasesShareDraws) {
  for (const ModelSpec& spec : {cnn(), mlp(Granularity::neuron)}) {
    const ParamStore store = tuned(spec, 3, DType::f32);
    MixoutConfig cfg;
    cfg.swap_rate = 0.5;
    for (std::int64_t step = 0; step < 100; ++step) {
      const auto m = sample_mask(cfg, store, step);
      for (const auto& [name, e] : m.masks) {
        const Tensor x = e.expanded();
        const std::size_t units = e.param_shape[0], per = x.size() / units;
        for (std::size_t u = 0; u < units; ++u)
          for (std::size_t i = 0; i < per; ++i) ASSERT_EQ(x[u * per + i], x[u * per]) << name;
        if (name.ends_with(".weight")) {
          const std::string bias = name.substr(0, name.size() - 7) + ".bias";
          if (m.masks.contains(bias)) {
            const Tensor bx = m.masks.at(bias).expanded();
            for (std::size_t u = 0; u < units; ++u) ASSERT_EQ(bx[u], x[u * per]) << bias;
          }
        }
      }
    }
  }
}

TEST(MixoutMasks, GranularityRulesAreEnforced) {
  const ParamStore store = tuned(cnn(), 3, DType::f32);
  MixoutConfig cfg;
  cfg.granularity["conv0"] = Granularity::element;
  EXPECT_THROW(sample_mask(cfg, store, 0), MixlabError);
  const ParamStore dense = tuned(mlp(), 3, DType::f32);
  MixoutConfig bad;
  bad.granularity["fc0"] = Granularity::filter;
  EXPECT_THROW(sample_mask(bad, dense, 0), MixlabError);
}

TEST(MixoutConfig, Validation) {
  MixoutConfig c;
  c.swap_rate = 1.2;
  EXPECT_THROW(c.validate(), MixlabError);
  c.swap_rate = -0.1;
  EXPECT_THROW(c.validate(), MixlabError);
  c.swap_rate = 1.0;
  EXPECT_THROW(c.validate(), MixlabError);
  c.scaling_mode = ScalingMode::raw;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(parse_scaling_mode("eval_expected"), ScalingMode::eval_expected);
  EXPECT_THROW(parse_scaling_mode("bogus"), MixlabError);
}

TEST(MixoutMasks, MissingReferenceIsStateError) {
  const ParamStore store = build_model(mlp(), RngStream(1, "m"));
  MixoutConfig cfg;
  try {
    sample_mask(cfg, store, 0);
    FAIL();
  } catch (const MixlabError& e) {
    EXPECT_EQ(e.code(), ErrorCode::state);
  }
}

TEST(MixoutLimits, ZeroSwapRateIsPlainFineTuningBitwise) {
  for (const ModelSpec& spec : {mlp(), cnn()}) {
    ParamStore a = tuned(spec, 5, DType::f32), b = a;
    Optimizer oa, ob;
    MixoutConfig cfg;
    cfg.swap_rate = 0.0;
    for (std::int64_t step = 0; step < 20; ++step) {
      const Batch bt = batch_for(spec, 8, 100 + static_cast<std::uint64_t>(step), DType::f32);
      const double la = train_step(a, spec, bt, &cfg, oa, step);
      const double lb = train_step(b, spec, bt, nullptr, ob, step);
      ASSERT_EQ(la, lb);
    }
    EXPECT_TRUE(identical(a, b));
  }
}

TEST(MixoutLimits, FullSwapRateKeepsReference) {
  for (ScalingMode mode : {ScalingMode::raw, ScalingMode::eval_expected}) {
    ParamStore store = build_model(mlp(), RngStream(6, "m"));
    adopt_pretrained(store);
    Optimizer opt;
    MixoutConfig cfg;
    cfg.swap_rate = 1.0;
    cfg.scaling_mode = mode;
    for (std::int64_t step = 0; step < 25; ++step)
      train_step(store, mlp(), batch_for(mlp(), 8, 200 + static_cast<std::uint64_t>(step), DType::f32), &cfg, opt,
                 step);
    for (const auto& name : store.names()) {
      const MixParam& p = store.at(name);
      if (p.eligible) {
        EXPECT_TRUE(identical(p.theta, *p.theta0)) << name;
      }
    }
  }
}

TEST(MixoutTraining, SwappedEntriesAreNotUpdated) {
  ParamStore store = tuned(mlp(), 7, DType::f32);
  const ParamStore before = store;
  MixoutConfig cfg;
  cfg.swap_rate = 0.8;
  const auto mask = sample_mask(cfg, store, 0);
  Optimizer opt;
  train_step(store, mlp(), batch_for(mlp(), 8, 1, DType::f32), &cfg, opt, 0);
  for (const auto& [name, e] : mask.masks) {
    const Tensor x = e.expanded();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] == 0.0) {
        EXPECT_EQ(store.at(name).theta[i], before.at(name).theta[i]);
      }
    }
  }
}

TEST(MixoutTraining, DivergenceIsReported) {
  ParamStore store = tuned(mlp(), 8, DType::f64);
  for (const auto& name : store.names())
    for (double& v : store.at(name).theta.data()) v *= 1e160;
  Optimizer opt;
  try {
    train_step(store, mlp(), batch_for(mlp(), 4, 1, DType::f64), nullptr, opt, 0);
    FAIL();
  } catch (const MixlabError& e) {
    EXPECT_EQ(e.code(), ErrorCode::divergence);
  }
}

TEST(WeightScaling, ExpectedParametersInvertToTheta) {
  const ParamStore store = tuned(mlp(), 9, DType::f64);
  for (double s : {0.2, 0.5, 0.9}) {
    MixoutConfig cfg;
    cfg.swap_rate = s;
    cfg.scaling_mode = ScalingMode::eval_expected;
    const double k = cfg.keep();
    const TensorMap bar = expected_params(store, cfg);
    for (const auto& [name, t] : bar) {
      const MixParam& p = store.at(name);
      for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR((t[i] - (1 - k) * (*p.theta0)[i]) / k, p.theta[i], 1e-12);
    }
    EXPECT_EQ(inference_params(store, cfg).size(), bar.size());
    cfg.scaling_mode = ScalingMode::train_corrected;
    for (const auto& [name, t] : inference_params(store, cfg)) EXPECT_TRUE(identical(t, store.at(name).theta)) << name;
  }
}

TEST(WeightScaling, MonteCarloParameterMeanWithinBinomialBand) {
  const ParamStore store = tuned(mlp(), 10, DType::f64);
  MixoutConfig cfg;
  cfg.swap_rate = 0.7;
  cfg.scaling_mode = ScalingMode::eval_expected;
  const double k = cfg.keep();
  const int n = 10000;
  TensorMap acc;
  for (int i = 0; i < n; ++i)
    for (const auto& [name, t] : apply_swap(store, mc_mask(cfg, store, i))) {
      auto [it, fresh] = acc.try_emplace(name, Tensor::zeros(t.shape(), DType::f64));
      (void)fresh;
      for (std::size_t j = 0; j < t.size(); ++j) it->second[j] += t[j];
    }
  const TensorMap bar = expected_params(store, cfg);
  for (const auto& [name, sum] : acc) {
    const MixParam& p = store.at(name);
    for (std::size_t j = 0; j < sum.size(); ++j) {
      const double d = std::abs(p.theta[j] - (*p.theta0)[j]);
      const double sigma = d * std::sqrt(k * (1 - k) / n);
      EXPECT_LE(std::abs(sum[j] / n - bar.at(name)[j]), 3 * sigma + 1e-12) << name << "[" << j << "]";
    }
  }
}

TEST(EnsembleSurrogate, LinearModelHasNoGap) {
  ModelSpec spec;
  spec.arch = Arch::linear;
  spec.input_dim = 3;
  spec.classes = 3;
  spec.activation = Activation::identity;
  spec.mix_biases = true;
  const ParamStore store = tuned(spec, 11, DType::f64);
  ASSERT_LE(oracle::eligible_entries(store), 12u);
  const Tensor x = batch_for(spec, 4, 12, DType::f64).x;
  for (double s : {0.3, 0.9}) {
    MixoutConfig cfg;
    cfg.swap_rate = s;
    cfg.scaling_mode = ScalingMode::eval_expected;
    const Tensor exact = oracle::enumerate_expected_logits(store, spec, x, cfg.keep());
    const TensorMap bar = expected_params(store, cfg);
    EXPECT_LT(max_abs_diff(exact, forward(store, spec, x, &bar, DType::f64)), 1e-12);
  }
}

TEST(EnsembleSurrogate, GapIsSecondOrderInDisplacement) {
  ModelSpec spec;
  spec.arch = Arch::linear;
  spec.input_dim = 4;
  spec.classes = 3;
  spec.activation = Activation::tanh;
  const ParamStore base = tuned(spec, 13, DType::f64);
  ASSERT_EQ(oracle::eligible_entries(base), 12u);
  const Tensor x = batch_for(spec, 5, 14, DType::f64).x;
  MixoutConfig cfg;
  cfg.swap_rate = 0.5;
  cfg.scaling_mode = ScalingMode::eval_expected;
  auto gap = [&](double factor) {
    ParamStore s = base;
    for (const auto& name : s.names()) {
      MixParam& p = s.at(name);
      if (!p.theta0) continue;
      for (std::size_t i = 0; i < p.theta.size(); ++i)
        p.theta[i] = (*p.theta0)[i] + factor * (base.at(name).theta[i] - (*p.theta0)[i]);
    }
    const Tensor exact = oracle::enumerate_expected_logits(s, spec, x, cfg.keep());
    const TensorMap bar = expected_params(s, cfg);
    return max_abs_diff(exact, forward(s, spec, x, &bar, DType::f64));
  };
  const double g1 = gap(0.5), g2 = gap(0.25);
  ASSERT_GT(g1, 0.0);
  EXPECT_GE(g1 / g2, 3.0);
  EXPECT_LE(g1 / g2, 6.0);
}

TEST(MonteCarlo, SingleSampleIsOneSubnetwork) {
  const ModelSpec spec = mlp();
  const ParamStore store = tuned(spec, 15, DType::f64);
  MixoutConfig cfg;
  cfg.swap_rate = 0.5;
  const Tensor x = batch_for(spec, 3, 16, DType::f64).x;
  const TensorMap sub = subnetwork_params(store, cfg, mc_mask(cfg, store, 0));
  EXPECT_TRUE(equal_exact(mc_predict(store, spec, x, cfg, 1), forward(store, spec, x, &sub, DType::f64)));
}

TEST(MonteCarlo, LargeKApproachesSurrogateForSmallDisplacement) {
  const ModelSpec spec = mlp();
  ParamStore store = tuned(spec, 17, DType::f64);
  MixoutConfig cfg;
  cfg.swap_rate = 0.5;
  cfg.scaling_mode = ScalingMode::eval_expected;
  const Tensor x = batch_for(spec, 4, 18, DType::f64).x;
  const double g4 = ensemble_surrogate_gap(store, spec, x, cfg, 4);
  const double g256 = ensemble_surrogate_gap(store, spec, x, cfg, 256);
  EXPECT_LT(g256, g4);
}

TEST(WeightScaling, MonteCarloDeviationsAreCalibrated) {
  ModelSpec spec;
  spec.arch = Arch::mlp;
  spec.input_dim = 40;
  spec.hidden = {50};
  spec.classes = 3;
  spec.mix_biases = true;
  const ParamStore store = tuned(spec, 19, DType::f64);
  MixoutConfig cfg;
  cfg.swap_rate = 0.8;
  cfg.scaling_mode = ScalingMode::eval_expected;
  const double k = cfg.keep();
  const int n = 2000;
  TensorMap sum;
  for (int i = 0; i < n; ++i)
    for (const auto& [name, t] : apply_swap(store, mc_mask(cfg, store, i))) {
      auto it = sum.try_emplace(name, Tensor::zeros(t.shape(), DType::f64)).first;
      for (std::size_t j = 0; j < t.size(); ++j) it->second[j] += t[j];
    }
  double entries = 0, beyond2 = 0, zz = 0;
  for (const auto& [name, bar] : expected_params(store, cfg)) {
    const MixParam& p = store.at(name);
    for (std::size_t j = 0; j < bar.size(); ++j) {
      const double sigma = std::abs(p.theta[j] - (*p.theta0)[j]) * std::sqrt(k * (1 - k) / n);
      if (sigma == 0.0) continue;
      const double z = (sum.at(name)[j] / n - bar[j]) / sigma;
      entries += 1;
      beyond2 += std::abs(z) > 2;
      zz += z * z;
    }
  }
  ASSERT_GT(entries, 2000);
  // About 4.6% of standard normal draws lie beyond 2 sigma.
  EXPECT_NEAR(beyond2 / entries, 0.0455, 0.02);
  EXPECT_NEAR(zz / entries, 1.0, 0.1);
}
