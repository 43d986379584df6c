// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "mixlab/dropout.hpp"
#include "mixlab/regularizers.hpp"
#include "support/oracles.hpp"

using namespace mixlab;

namespace {

ModelSpec mlp() {
  ModelSpec s;
  s.arch = Arch::mlp;
  s.input_dim = 5;
  s.hidden = {6};
  s.classes = 3;
  return s;
}

ModelSpec linear_model() {
  ModelSpec s;
  s.arch = Arch::linear;
  s.input_dim = 4;
  s.classes = 3;
  s.activation = Activation::identity;
  return s;
}

ParamStore tuned(const ModelSpec& spec, std::uint64_t seed) {
  ParamStore store = build_model(spec, RngStream(seed, "test/model"), DType::f64);
  adopt_pretrained(store);
  RngStream j(seed, "test/jitter");
  for (const auto& name : store.names())
    for (double& v : store.at(name).theta.data()) v += 0.25 * j.normal();
  return store;
}

// Multiples of 1/8 and 1/4: every sum and every division by a power of two is exact.
ParamStore dyadic(const ModelSpec& spec, std::uint64_t seed) {
  ParamStore s = build_model(spec, RngStream(seed, "test/model"), DType::f64);
  RngStream r(seed, "test/dyadic");
  for (const auto& name : s.names())
    for (double& v : s.at(name).theta.data()) v = static_cast<double>(static_cast<int>(r.below(33)) - 16) / 8.0;
  return s;
}

Tensor inputs(std::size_t rows, std::size_t width, std::uint64_t seed, bool dyadic_values = false) {
  RngStream s(seed, "test/x");
  Tensor x({rows, width}, DType::f64);
  for (double& v : x.data())
    v = dyadic_values ? static_cast<double>(static_cast<int>(s.below(17)) - 8) / 4.0 : s.normal();
  return x;
}

}  // namespace

TEST(L2SP, GradientIsClosedFormAndMatchesFiniteDifferences) {
  const ParamStore store = tuned(mlp(), 1);
  const double c = 0.37;
  const TensorMap g = l2sp_gradient(store, c);
  for (const auto& name : store.names()) {
    const MixParam& p = store.at(name);
    if (!p.theta0) {
      EXPECT_FALSE(g.contains(name));
      continue;
    }
    auto f = [&](const std::vector<double>& v) {
      ParamStore s = store;
      s.at(name).theta = Tensor(p.theta.shape(), v, DType::f64);
      return l2sp_penalty(s, c);
    };
    const auto fd = oracle::central_difference(f, p.theta.vec(), 1e-5);
    EXPECT_LT(oracle::relative_error(g.at(name).data(), fd), 1e-7) << name;
    for (std::size_t i = 0; i < p.theta.size(); ++i)
      EXPECT_DOUBLE_EQ(g.at(name)[i], 2 * c * (p.theta[i] - (*p.theta0)[i]));
  }
}

TEST(L2SP, PenaltyIsZeroAtReference) {
  ParamStore store = build_model(mlp(), RngStream(2, "m"));
  adopt_pretrained(store);
  EXPECT_EQ(l2sp_penalty(store, 1.0), 0.0);
}

TEST(L2SP, TrainStepAddsPenaltyGradient) {
  const ModelSpec spec = mlp();
  ParamStore a = tuned(spec, 3);
  RngStream s(3, "batch");
  Batch b{inputs(6, 5, 4), {0, 1, 2, 0, 1, 2}};
  TrainStepReport plain, reg;
  Optimizer o1(OptimizerConfig{OptimizerKind::sgd, 1e-3}), o2(OptimizerConfig{OptimizerKind::sgd, 1e-3});
  TrainStepOptions p1;
  p1.report = &plain;
  p1.dtype = DType::f64;
  TrainStepOptions p2 = p1;
  p2.report = &reg;
  p2.l2sp_coeff = 0.5;
  ParamStore a2 = a;
  train_step(a, spec, b, nullptr, o1, 0, p1);
  train_step(a2, spec, b, nullptr, o2, 0, p2);
  const TensorMap closed = l2sp_gradient(tuned(spec, 3), 0.5);
  for (const auto& [name, g] : closed)
    for (std::size_t i = 0; i < g.size(); ++i)
      EXPECT_NEAR(reg.grads.at(name)[i], plain.grads.at(name)[i] + g[i], 1e-12) << name;
}

TEST(MovingAverage, MatchesArithmeticMean) {
  const ModelSpec spec = mlp();
  std::vector<ParamStore> snaps;
  for (std::uint64_t i = 0; i < 5; ++i) snaps.push_back(tuned(spec, 10 + i));
  MovingAverage ma(2);
  for (std::int64_t step = 0; step < 5; ++step) ma.update(snaps[static_cast<std::size_t>(step)], step);
  EXPECT_EQ(ma.count(), 3u);
  for (const auto& name : snaps[0].names())
    for (std::size_t i = 0; i < snaps[0].at(name).theta.size(); ++i) {
      const double want = (snaps[2].at(name).theta[i] + snaps[3].at(name).theta[i] + snaps[4].at(name).theta[i]) / 3;
      EXPECT_NEAR(ma.average().at(name).theta[i], want, 1e-12);
    }
  MovingAverage empty(100);
  EXPECT_TRUE(empty.empty());
  EXPECT_THROW(empty.average(), MixlabError);
}

TEST(LPFT, ScheduleSwitchesAtBoundary) {
  EXPECT_EQ(lpft_schedule(0, 10), LpftPhase::head_only);
  EXPECT_EQ(lpft_schedule(9, 10), LpftPhase::head_only);
  EXPECT_EQ(lpft_schedule(10, 10), LpftPhase::full);
}

TEST(LPFT, HeadOnlyStepLeavesBodyUntouched) {
  const ModelSpec spec = mlp();
  ParamStore store = tuned(spec, 4);
  const ParamStore before = store;
  Optimizer opt;
  TrainStepOptions o;
  o.head_only = true;
  train_step(store, spec, Batch{inputs(6, 5, 5), {0, 1, 2, 0, 1, 2}}, nullptr, opt, 0, o);
  for (const auto& name : store.names())
    EXPECT_EQ(identical(store.at(name).theta, before.at(name).theta), !store.at(name).head) << name;
}

TEST(FixedMixout, MaskIsReusedAcrossSteps) {
  const ModelSpec spec = mlp();
  ParamStore store = tuned(spec, 6);
  const ParamStore before = store;
  MixoutConfig cfg;
  cfg.swap_rate = kFixedMixoutDefaultRate;
  cfg.scaling_mode = ScalingMode::eval_expected;
  const RngStream stream(6, "fixed");
  const MaskRealization m = fixed_mixout_masks(cfg, store, stream);
  const MaskRealization again = fixed_mixout_masks(cfg, store, stream);
  for (const auto& [name, e] : m.masks) EXPECT_TRUE(identical(e.units, again.masks.at(name).units));
  Optimizer opt;
  TrainStepOptions o;
  o.fixed_mask = &m;
  for (std::int64_t step = 0; step < 10; ++step)
    train_step(store, spec, Batch{inputs(6, 5, 20 + static_cast<std::uint64_t>(step)), {0, 1, 2, 0, 1, 2}}, &cfg, opt,
               step, o);
  std::size_t moved = 0, frozen = 0;
  for (const auto& [name, e] : m.masks) {
    const Tensor x = e.expanded();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const bool same = store.at(name).theta[i] == before.at(name).theta[i];
      if (x[i] == 0.0) {
        EXPECT_TRUE(same);
        ++frozen;
      } else {
        moved += !same;
      }
    }
  }
  EXPECT_GT(frozen, 0u);
  EXPECT_GT(moved, 0u);
}

TEST(Ensembles, WeightAverageEqualsOutputAverageOnLinearModels) {
  const ModelSpec spec = linear_model();
  std::vector<ParamStore> members;
  for (std::uint64_t i = 0; i < 4; ++i) members.push_back(dyadic(spec, 30 + i));
  const Tensor x = inputs(5, 4, 7, true);
  EXPECT_TRUE(equal_exact(deep_ensemble_predict(members, spec, x),
                          forward(weight_average(members), spec, x, nullptr, DType::f64)));
}

TEST(Ensembles, NonlinearModelsDiffer) {
  const ModelSpec spec = mlp();
  std::vector<ParamStore> members;
  for (std::uint64_t i = 0; i < 3; ++i) members.push_back(tuned(spec, 40 + i));
  const Tensor x = inputs(5, 5, 8);
  EXPECT_GT(max_abs_diff(deep_ensemble_predict(members, spec, x),
                         forward(weight_average(members), spec, x, nullptr, DType::f64)),
            1e-6);
}

TEST(Ensembles, MismatchedMembersAreRejected) {
  std::vector<ParamStore> members{tuned(mlp(), 1)};
  ModelSpec other = mlp();
  other.hidden = {7};
  members.push_back(tuned(other, 2));
  EXPECT_THROW(weight_average(members), MixlabError);
}

TEST(LoRA, MergeReproducesAdapterForward) {
  const ModelSpec spec = mlp();
  ParamStore wrapped = lora_wrap(tuned(spec, 9), spec, 2, RngStream(9, "lora"));
  RngStream r(9, "a");
  for (const auto& name : wrapped.names())
    if (wrapped.at(name).kind == ParamKind::adapter)
      for (double& v : wrapped.at(name).theta.data()) v = 0.3 * r.normal();
  const Tensor x = inputs(6, 5, 10);
  const ParamStore merged = lora_merge(wrapped);
  for (const auto& name : merged.names()) EXPECT_NE(merged.at(name).kind, ParamKind::adapter);
  EXPECT_LT(max_abs_diff(forward(wrapped, spec, x, nullptr, DType::f64), forward(merged, spec, x, nullptr, DType::f64)),
            1e-6);
}

TEST(LoRA, StartsAtBaseAndFreezesBody) {
  const ModelSpec spec = mlp();
  const ParamStore base = tuned(spec, 11);
  const ParamStore wrapped = lora_wrap(base, spec, 2, RngStream(11, "lora"));
  const Tensor x = inputs(4, 5, 12);
  EXPECT_TRUE(equal_exact(forward(base, spec, x, nullptr, DType::f64), forward(wrapped, spec, x, nullptr, DType::f64)));
  EXPECT_EQ(trainable_parameter_count(wrapped), lora_trainable_count(6, 5, 2) + 6 * 3 + 3);
  EXPECT_THROW(lora_wrap(base, spec, 6, RngStream(1, "l")), MixlabError);
}

TEST(LoRA, TrainingMovesOnlyAdaptersAndHead) {
  const ModelSpec spec = mlp();
  ParamStore store = lora_wrap(tuned(spec, 13), spec, 2, RngStream(13, "lora"));
  const ParamStore before = store;
  Optimizer opt;
  train_step(store, spec, Batch{inputs(6, 5, 14), {0, 1, 2, 0, 1, 2}}, nullptr, opt, 0);
  for (const auto& name : store.names()) {
    const MixParam& p = store.at(name);
    if (!p.trainable) EXPECT_TRUE(identical(p.theta, before.at(name).theta)) << name;
  }
  EXPECT_FALSE(identical(store.at("fc0.lora_A").theta, before.at("fc0.lora_A").theta));
}

TEST(Dropout, RateZeroIsIdentity) {
  RngStream s(1, "d");
  Tensor x({2, 3, 4, 4}, DType::f64);
  for (double& v : x.data()) v = s.normal();
  EXPECT_TRUE(identical(dropout_forward(x, 0.0, s, true), x));
  EXPECT_TRUE(identical(dropfilter_forward(x, 0.0, s, true), x));
  EXPECT_TRUE(identical(dropout_forward(x, 0.5, s, false), x));
  Graph g(DType::f64);
  Var v = g.constant(x);
  EXPECT_TRUE(identical(dropout_forward(v, 0.0, s, true).value(), x));
}

TEST(Dropout, DropFilterZeroesWholeChannels) {
  RngStream s(2, "d");
  Tensor x = Tensor::ones({8, 6, 3, 3}, DType::f64);
  const Tensor y = dropfilter_forward(x, 0.5, s, true);
  std::size_t dropped = 0;
  for (std::size_t c = 0; c < 48; ++c) {
    const double first = y[c * 9];
    for (std::size_t i = 0; i < 9; ++i) ASSERT_EQ(y[c * 9 + i], first);
    EXPECT_TRUE(first == 0.0 || first == 2.0);
    dropped += first == 0.0;
  }
  EXPECT_GT(dropped, 0u);
  EXPECT_LT(dropped, 48u);
}

TEST(Dropout, ExpectationIsPreserved) {
  RngStream s(3, "d");
  const Tensor x = Tensor::ones({20000}, DType::f64);
  const Tensor y = dropout_forward(x, 0.3, s, true);
  double m = 0;
  for (double v : y.data()) m += v;
  EXPECT_NEAR(m / 20000, 1.0, 0.03);
}
