// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "mixlab/protocol.hpp"

using namespace mixlab;

namespace {

DomainSpec spec_for(Generator g) {
  DomainSpec d;
  d.generator = g;
  d.samples_per_domain = 120;
  switch (g) {
    case Generator::rotated_clusters: d.domain_params = {0, 45, 90}; break;
    case Generator::spurious_channel: d.domain_params = {0.9, 0.5, -0.5}; break;
    case Generator::textured_shapes: d.domain_params = {0, 1, 2, 3}; break;
  }
  return d;
}

}  // namespace

TEST(Generators, DeterministicAndTagged) {
  for (Generator g : {Generator::rotated_clusters, Generator::spurious_channel, Generator::textured_shapes}) {
    const DomainSpec d = spec_for(g);
    const Dataset a = generate_domain(d, 1, RngStream(3, "dom"));
    const Dataset b = generate_domain(d, 1, RngStream(3, "dom"));
    EXPECT_TRUE(identical(a.x, b.x));
    EXPECT_EQ(a.y, b.y);
    EXPECT_EQ(a.size(), d.samples_per_domain);
    EXPECT_EQ(a.x.size(), d.samples_per_domain * d.input_size());
    for (int t : a.domain) EXPECT_EQ(t, 1);
    std::vector<int> counts(d.classes, 0);
    for (int y : a.y) ++counts[static_cast<std::size_t>(y)];
    for (int c : counts) EXPECT_EQ(c, static_cast<int>(d.samples_per_domain / d.classes));
  }
}

TEST(Generators, DomainsShareMechanismButDiffer) {
  const DomainSpec d = spec_for(Generator::rotated_clusters);
  const Dataset a = generate_domain(d, 0, RngStream(3, "dom"));
  const Dataset b = generate_domain(d, 2, RngStream(3, "dom"));
  EXPECT_FALSE(identical(a.x, b.x));
  DomainSpec other = d;
  other.mechanism_seed = 8;
  EXPECT_FALSE(identical(generate_domain(other, 0, RngStream(3, "dom")).x, a.x));
}

TEST(Generators, SpuriousChannelFollowsCorrelation) {
  DomainSpec d = spec_for(Generator::spurious_channel);
  d.samples_per_domain = 800;
  // Nearest-centroid labels read off the nuisance channel alone.
  const Dataset fit = generate_domain(d, 0, RngStream(4, "dom"));
  const std::size_t w = d.input_size(), sd = d.spurious_dim, off = d.core_dim;
  std::vector<std::vector<double>> centroid(d.classes, std::vector<double>(sd, 0.0));
  std::vector<double> n(d.classes, 0.0);
  for (std::size_t i = 0; i < fit.size(); ++i) {
    const auto y = static_cast<std::size_t>(fit.y[i]);
    n[y] += 1;
    for (std::size_t j = 0; j < sd; ++j) centroid[y][j] += fit.x[i * w + off + j];
  }
  auto accuracy_on = [&](std::size_t domain) {
    const Dataset data = generate_domain(d, domain, RngStream(5, "dom"));
    double hit = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t c = 0; c < d.classes; ++c) {
        double dist = 0;
        for (std::size_t j = 0; j < sd; ++j) {
          const double diff = data.x[i * w + off + j] - centroid[c][j] / n[c];
          dist += diff * diff;
        }
        if (dist < best_d) {
          best_d = dist;
          best = c;
        }
      }
      hit += static_cast<int>(best) == data.y[i];
    }
    return hit / static_cast<double>(data.size());
  };
  EXPECT_GT(accuracy_on(0), 0.85);
  EXPECT_LT(accuracy_on(2), 0.3);
}

TEST(Generators, InvalidSpecsAreRejected) {
  DomainSpec d = spec_for(Generator::spurious_channel);
  d.domain_params = {0.5, 1.5};
  EXPECT_THROW(d.validate(), MixlabError);
  DomainSpec t = spec_for(Generator::textured_shapes);
  t.domain_params = {0, 7};
  EXPECT_THROW(t.validate(), MixlabError);
  DomainSpec c = spec_for(Generator::rotated_clusters);
  c.classes = 1;
  EXPECT_THROW(c.validate(), MixlabError);
}

TEST(Splits, StratifiedAndDisjoint) {
  const DomainSpec d = spec_for(Generator::rotated_clusters);
  Dataset data = generate_domain(d, 0, RngStream(5, "dom"));
  auto [train, val] = split(data, 0.75, RngStream(5, "split"));
  EXPECT_EQ(train.size() + val.size(), data.size());
  // 30 rows per class; each class keeps round(0.75 * 30) = 23.
  std::vector<int> counts(d.classes, 0);
  for (int y : train.y) ++counts[static_cast<std::size_t>(y)];
  for (int c : counts) EXPECT_EQ(c, 23);
  EXPECT_EQ(val.size(), 7u * d.classes);
}

TEST(Protocol, SourceDataNeverContainsHeldOutDomain) {
  Benchmark b = builtin_benchmark("rotated_clusters");
  b.domains.samples_per_domain = 80;
  b.pretrain.steps = 5;
  b.train.steps = 3;
  const SeedData data = make_seed_data(b, 1, 0);
  ASSERT_EQ(data.full.size(), 4u);
  for (std::size_t d = 0; d < data.full.size(); ++d) {
    for (int t : data.train[d].domain) EXPECT_EQ(t, static_cast<int>(d));
    for (int t : data.val[d].domain) EXPECT_EQ(t, static_cast<int>(d));
  }
}

TEST(Protocol, LeaveOneOutCoversEveryDomainAndSeed) {
  Benchmark b = builtin_benchmark("spurious_channel");
  b.domains.samples_per_domain = 80;
  b.pretrain.steps = 10;
  b.pretrain.samples = 200;
  b.train.steps = 5;
  b.train.diag_samples = 20;
  b.train.disagreement_pairs = 3;
  const ProtocolResult r = run_protocol(b, parse_method("mixout"), {1, 2}, {});
  ASSERT_EQ(r.records.size(), 8u);
  std::set<std::pair<std::uint64_t, int>> cells;
  for (const auto& rec : r.records) {
    cells.emplace(rec.seed, rec.held_out_domain);
    EXPECT_GE(rec.ood_acc, 0.0);
    EXPECT_LE(rec.ood_acc, 1.0);
    EXPECT_TRUE(rec.disagreement_in.has_value());
    EXPECT_EQ(rec.step_count, 5u);
  }
  EXPECT_EQ(cells.size(), 8u);
  EXPECT_EQ(r.ood().n, 2u);
}

TEST(Protocol, ParallelMatchesSerial) {
  Benchmark b = builtin_benchmark("rotated_clusters");
  b.domains.samples_per_domain = 60;
  b.pretrain.steps = 10;
  b.pretrain.samples = 200;
  b.train.steps = 5;
  b.train.diag_samples = 20;
  b.train.disagreement_pairs = 2;
  ProtocolOptions serial, parallel;
  parallel.threads = 3;
  const auto a = run_protocol(b, parse_method("mixout"), {1, 2}, serial);
  const auto c = run_protocol(b, parse_method("mixout"), {1, 2}, parallel);
  ASSERT_EQ(a.records.size(), c.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].ood_acc, c.records[i].ood_acc);
    EXPECT_EQ(a.records[i].theta_dist, c.records[i].theta_dist);
    EXPECT_EQ(a.records[i].disagreement_ood, c.records[i].disagreement_ood);
  }
}

TEST(Protocol, ZeroSwapRateReproducesErm) {
  Benchmark b = builtin_benchmark("rotated_clusters");
  b.domains.samples_per_domain = 60;
  b.pretrain.steps = 10;
  b.pretrain.samples = 200;
  b.train.steps = 8;
  MethodConfig mix = parse_method("mixout");
  mix.mixout_config.swap_rate = 0.0;
  const auto m = run_protocol(b, mix, {3}, {});
  const auto e = run_protocol(b, parse_method("erm"), {3}, {});
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    EXPECT_EQ(m.records[i].in_acc, e.records[i].in_acc);
    EXPECT_EQ(m.records[i].ood_acc, e.records[i].ood_acc);
    EXPECT_EQ(m.records[i].theta_dist, e.records[i].theta_dist);
  }
}

TEST(Protocol, EveryMethodRuns) {
  Benchmark b = builtin_benchmark("rotated_clusters");
  b.domains.samples_per_domain = 40;
  b.pretrain.steps = 5;
  b.pretrain.samples = 100;
  b.train.steps = 4;
  b.train.eval_every = 2;
  b.train.diag_samples = 10;
  b.train.disagreement_pairs = 2;
  ProtocolOptions o;
  o.held_out = {1};
  Benchmark t = builtin_benchmark("textured_shapes");
  t.domains.samples_per_domain = 16;
  t.pretrain = b.pretrain;
  t.train = b.train;
  for (const auto& name : known_methods()) {
    const bool conv = name.find("dropfilter") != std::string::npos;
    MethodConfig m = parse_method(name);
    m.members = 2;
    const auto r = run_protocol(conv ? t : b, m, {1}, o);
    ASSERT_EQ(r.records.size(), 1u) << name;
    EXPECT_EQ(r.records[0].method, name);
  }
}

TEST(Methods, ParsingAndCombinations) {
  EXPECT_TRUE(parse_method("mixout+ma").ma);
  EXPECT_TRUE(parse_method("mixout+ma").mixout);
  EXPECT_TRUE(parse_method("mixout+l2sp").l2sp);
  EXPECT_TRUE(parse_method("mixout+lpft").lpft);
  EXPECT_EQ(parse_method("fixed_mixout").mixout_config.swap_rate, 0.1);
  EXPECT_THROW(parse_method("mixout+lora"), MixlabError);
  EXPECT_THROW(parse_method("sgd"), MixlabError);
}

TEST(Diagnostics, DisagreementRate) {
  EXPECT_EQ(disagreement_rate({1, 2, 3, 4}, {1, 2, 0, 0}), 0.5);
  EXPECT_THROW(disagreement_rate({1}, {1, 2}), MixlabError);
}

TEST(Summaries, MeanAndStandardError) {
  const Summary s = summarize({1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.0);
  EXPECT_NEAR(s.stderr_, 1.0 / std::sqrt(3.0), 1e-12);
  EXPECT_EQ(s.n, 3u);
}
