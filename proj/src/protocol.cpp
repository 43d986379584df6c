// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/protocol.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <sstream>
#include <thread>

#include "mixlab/checkpoint.hpp"

namespace mixlab {

std::vector<double> MethodConfig::candidate_rates() const {
  if (!uses_swap_rate()) return {0.0};
  if (swap_rate_grid.empty()) return {mixout_config.swap_rate};
  return swap_rate_grid;
}

void MethodConfig::validate() const {
  auto bad = [this](const std::string& m) { fail(ErrorCode::config, "method '" + name + "': " + m); };
  if (mixout && fixed_mixout) bad("dynamic and fixed Mixout are exclusive");
  if (ensemble && diwa) bad("choose one of ensemble and diwa");
  if (lora && (mixout || fixed_mixout)) bad("LoRA freezes the backbone and cannot be combined with Mixout");
  for (double s : candidate_rates()) {
    MixoutConfig c = mixout_config;
    c.swap_rate = s;
    if (uses_swap_rate()) c.validate();
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) bad("dropout_rate must lie in [0,1)");
  if (!(l2sp_coeff >= 0.0)) bad("l2sp_coeff must be >= 0");
  if (!(ma_start_fraction >= 0.0 && ma_start_fraction < 1.0)) bad("ma_start must lie in [0,1)");
  if (!(lpft_fraction >= 0.0 && lpft_fraction <= 1.0)) bad("lpft_boundary must lie in [0,1]");
  if (members == 0) bad("members must be >= 1");
  if (lora && lora_rank == 0) bad("lora_rank must be >= 1");
}

const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> names{
      "erm",  "mixout", "dropout",      "dropfilter", "ensemble",  "diwa",       "lora",         "fixed_mixout",
      "lpft", "l2sp",   "ma",           "mixout+ma",  "mixout+l2sp", "mixout+lpft", "mixout+dropout",
      "mixout+dropfilter"};
  return names;
}

MethodConfig parse_method(const std::string& name) {
  MethodConfig m;
  m.name = name;
  std::stringstream ss(name);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '+')) parts.push_back(part);
  require(!parts.empty(), ErrorCode::config, "empty method name");
  require(parts.size() == 1 || parts.front() == "mixout", ErrorCode::config,
          "unknown method '" + name + "': only mixout combines with other techniques");
  for (const auto& p : parts) {
    if (p == "erm") {
      require(parts.size() == 1, ErrorCode::config, "erm does not combine");
    } else if (p == "mixout") {
      m.mixout = true;
    } else if (p == "fixed_mixout") {
      m.fixed_mixout = true;
      m.mixout_config.swap_rate = kFixedMixoutDefaultRate;
      m.mixout_config.scaling_mode = ScalingMode::eval_expected;
    } else if (p == "dropout") {
      m.dropout = true;
    } else if (p == "dropfilter") {
      m.dropfilter = true;
    } else if (p == "l2sp") {
      m.l2sp = true;
    } else if (p == "ma") {
      m.ma = true;
    } else if (p == "lpft") {
      m.lpft = true;
    } else if (p == "lora") {
      m.lora = true;
    } else if (p == "ensemble") {
      m.ensemble = true;
    } else if (p == "diwa") {
      m.diwa = true;
    } else {
      fail(ErrorCode::config, "unknown method '" + name + "'");
    }
  }
  if (parts.size() > 1)
    require(!m.lora && !m.ensemble && !m.diwa && !m.fixed_mixout, ErrorCode::config,
            "method '" + name + "' is not a supported combination");
  return m;
}

const char* to_string(CheckpointSelection s) { return s == CheckpointSelection::last ? "last" : "best_val"; }

CheckpointSelection parse_checkpoint_selection(const std::string& s) {
  if (s == "last") return CheckpointSelection::last;
  if (s == "best_val") return CheckpointSelection::best_val;
  fail(ErrorCode::config, "unknown checkpoint selection '" + s + "' (expected last or best_val)");
}

Benchmark builtin_benchmark(const std::string& name) {
  Benchmark b;
  b.name = name;
  const Generator g = parse_generator(name);
  b.domains.generator = g;
  switch (g) {
    case Generator::rotated_clusters:
      b.domains.domain_params = {0.0, 30.0, 60.0, 90.0};
      b.domains.classes = 4;
      b.domains.noise = 0.6;
      b.domains.core_dim = 8;
      b.model.arch = Arch::mlp;
      b.model.input_dim = b.domains.input_size();
      b.model.hidden = {32, 32};
      break;
    case Generator::spurious_channel:
      b.domains.domain_params = {0.9, 0.8, 0.7, -0.5};
      b.domains.classes = 4;
      b.domains.noise = 1.0;
      b.domains.core_dim = 8;
      b.domains.spurious_dim = 4;
      b.model.arch = Arch::mlp;
      b.model.input_dim = b.domains.input_size();
      b.model.hidden = {32, 32};
      break;
    case Generator::textured_shapes:
      b.domains.domain_params = {0.0, 1.0, 2.0, 3.0};
      b.domains.classes = 4;
      b.domains.noise = 1.0;
      b.domains.image_size = 16;
      b.model.arch = Arch::micro_cnn;
      b.model.in_channels = 1;
      b.model.image_size = 16;
      b.model.conv_channels = {4, 8};
      b.pretrain.steps = 900;
      b.pretrain.samples = 2000;
      b.train.steps = 120;
      b.train.batch_per_domain = 8;
      b.train.diag_samples = 100;
      break;
  }
  b.model.classes = b.domains.classes;
  return b;
}

const std::vector<std::string>& builtin_benchmark_names() {
  static const std::vector<std::string> names{"rotated_clusters", "spurious_channel", "textured_shapes"};
  return names;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.n = values.size();
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stderr_ = std::sqrt(ss / static_cast<double>(s.n - 1)) / std::sqrt(static_cast<double>(s.n));
  }
  return s;
}

namespace {

Summary per_seed(const std::vector<RunRecord>& records, double RunRecord::*field) {
  std::map<std::uint64_t, std::pair<double, std::size_t>> acc;
  for (const auto& r : records) {
    auto& [sum, n] = acc[r.seed];
    sum += r.*field;
    ++n;
  }
  std::vector<double> means;
  for (const auto& [seed, v] : acc) means.push_back(v.first / static_cast<double>(v.second));
  return summarize(means);
}

std::string run_label(const Benchmark& bench, std::uint64_t global_seed) {
  return "g" + std::to_string(global_seed) + "/" + bench.name;
}

}  // namespace

Summary ProtocolResult::ood() const { return per_seed(records, &RunRecord::ood_acc); }
Summary ProtocolResult::in_domain() const { return per_seed(records, &RunRecord::in_acc); }

std::map<int, double> ProtocolResult::per_domain_ood() const {
  std::map<int, std::pair<double, std::size_t>> acc;
  for (const auto& r : records) {
    acc[r.held_out_domain].first += r.ood_acc;
    ++acc[r.held_out_domain].second;
  }
  std::map<int, double> out;
  for (const auto& [d, v] : acc) out[d] = v.first / static_cast<double>(v.second);
  return out;
}

std::shared_ptr<const PretrainResult> PretrainCache::get(const Benchmark& bench, std::uint64_t seed,
                                                         std::uint64_t global_seed) {
  std::ostringstream key;
  key << run_label(bench, global_seed) << "/" << seed << "/" << spec_to_json(bench.model) << "/"
      << bench.pretrain.steps << "/" << bench.pretrain.batch << "/" << bench.pretrain.samples << "/"
      << bench.pretrain.lr << "/" << bench.domains.noise << "/" << bench.domains.mechanism_seed;
  std::promise<std::shared_ptr<const PretrainResult>> promise;
  std::shared_future<std::shared_ptr<const PretrainResult>> future;
  {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key.str());
    if (it != entries_.end()) return it->second.get();
    future = promise.get_future().share();
    entries_.emplace(key.str(), future);
  }
  try {
    RngStream stream(seed, run_label(bench, global_seed) + "/pretrain");
    promise.set_value(
        std::make_shared<const PretrainResult>(pretrain_reference(bench.domains, bench.model, bench.pretrain, stream)));
  } catch (...) {
    promise.set_exception(std::current_exception());
  }
  return future.get();
}

SeedData make_seed_data(const Benchmark& bench, std::uint64_t seed, std::uint64_t global_seed) {
  const RngStream base(seed, run_label(bench, global_seed) + "/data");
  SeedData d;
  for (std::size_t i = 0; i < bench.domains.domains(); ++i) {
    d.full.push_back(generate_domain(bench.domains, i, base));
    auto [train, val] = split(d.full.back(), 1.0 - bench.train.val_fraction, base.derive("split" + std::to_string(i)));
    d.train.push_back(std::move(train));
    d.val.push_back(std::move(val));
  }
  return d;
}

namespace {

ParamStore with_overrides(ParamStore store, const TensorMap& overrides) {
  for (const auto& [name, t] : overrides) store.at(name).theta = t;
  return store;
}

double theta_distance(const ParamStore& store) {
  double s = 0.0;
  for (const auto& name : store.names()) {
    const MixParam& p = store.at(name);
    if (!p.theta0) continue;
    for (std::size_t i = 0; i < p.theta.size(); ++i) {
      const double d = p.theta[i] - (*p.theta0)[i];
      s += d * d;
    }
  }
  return std::sqrt(s);
}

// Rows spread evenly over the dataset.
Tensor stride_rows(const Dataset& d, std::size_t rows) {
  if (rows == 0 || rows >= d.size()) return d.x;
  std::vector<std::size_t> idx(rows);
  for (std::size_t i = 0; i < rows; ++i) idx[i] = i * d.size() / rows;
  return d.subset(idx).x;
}

struct Trainer {
  const Benchmark& bench;
  const MethodConfig& method;
  const ModelSpec& model;
  const SeedData& data;
  int held_out;
  std::optional<MixoutConfig> mixout;
  std::vector<std::size_t> sources;

  Batch source_batch(RngStream& stream) const {
    std::vector<Batch> parts;
    for (auto d : sources) {
      std::vector<std::size_t> rows(bench.train.batch_per_domain);
      for (auto& r : rows) r = stream.below(data.train[d].size());
      Dataset sub = data.train[d].subset(rows);
      for (int tag : sub.domain)
        require(tag != held_out, ErrorCode::state, "held-out sample reached a training batch");
      parts.push_back({std::move(sub.x), std::move(sub.y)});
    }
    Shape shape = parts.front().x.shape();
    shape[0] = 0;
    std::vector<double> x;
    std::vector<int> y;
    for (auto& p : parts) {
      shape[0] += p.x.dim(0);
      x.insert(x.end(), p.x.data().begin(), p.x.data().end());
      y.insert(y.end(), p.y.begin(), p.y.end());
    }
    return {Tensor(shape, std::move(x), parts.front().x.dtype()), std::move(y)};
  }

  // The single network a trained store is evaluated as.
  ParamStore eval_store(const ParamStore& trained, const MaskRealization* fixed) const {
    if (method.lora) return lora_merge(trained);
    if (fixed) return with_overrides(trained, subnetwork_params(trained, *mixout, *fixed));
    if (mixout) return with_overrides(trained, inference_params(trained, *mixout));
    return trained;
  }

  ParamStore train_member(ParamStore store, const RngStream& run, const std::string& mixout_label) const {
    Optimizer opt(bench.train.optimizer);
    RngStream batches = run.derive("batches");
    RngStream drop = run.derive("dropout");
    std::optional<MixoutConfig> mc = mixout;
    if (mc) mc->rng_label = mixout_label;
    std::optional<MaskRealization> fixed;
    if (method.fixed_mixout) fixed = fixed_mixout_masks(*mc, store, run.derive("fixed"));
    const std::size_t steps = bench.train.steps;
    const auto ma_start = static_cast<std::int64_t>(std::floor(method.ma_start_fraction * static_cast<double>(steps)));
    const auto boundary = static_cast<std::int64_t>(std::llround(method.lpft_fraction * static_cast<double>(steps)));
    MovingAverage ma(ma_start);
    std::optional<ParamStore> best;
    double best_acc = -1.0;
    Dataset val;
    if (bench.train.selection == CheckpointSelection::best_val) {
      std::vector<const Dataset*> parts;
      for (auto d : sources) parts.push_back(&data.val[d]);
      val = concat(parts);
    }

    TrainStepOptions options;
    options.dropout_stream = &drop;
    options.l2sp_coeff = method.l2sp ? method.l2sp_coeff : 0.0;
    if (fixed) options.fixed_mask = &*fixed;
    for (std::size_t step = 0; step < steps; ++step) {
      const auto t = static_cast<std::int64_t>(step);
      options.head_only = method.lpft && lpft_schedule(t, boundary) == LpftPhase::head_only;
      const Batch b = source_batch(batches);
      train_step(store, model, b, mc ? &*mc : nullptr, opt, t, options);
      if (method.ma) ma.update(store, t);
      if (bench.train.selection == CheckpointSelection::best_val &&
          ((step + 1) % bench.train.eval_every == 0 || step + 1 == steps)) {
        const ParamStore& current = method.ma && !ma.empty() ? ma.average() : store;
        const double acc = accuracy(forward(eval_store(current, fixed ? &*fixed : nullptr), model, val.x), val.y);
        if (acc > best_acc) {
          best_acc = acc;
          best = current;
        }
      }
    }
    if (best) return *best;
    if (method.ma && !ma.empty()) return ma.average();
    return store;
  }
};

}  // namespace

FineTuneResult fine_tune(const Benchmark& bench, const MethodConfig& method, const PretrainResult& pretrained,
                         const SeedData& data, std::uint64_t seed, std::uint64_t global_seed, int held_out,
                         double swap_rate, bool timing) {
  method.validate();
  const auto t0 = std::chrono::steady_clock::now();
  require(held_out >= 0 && static_cast<std::size_t>(held_out) < data.full.size(), ErrorCode::invalid_argument,
          "held-out domain out of range");
  require(data.full.size() >= 3, ErrorCode::invalid_argument, "leave-one-out needs at least three domains");

  FineTuneResult out;
  out.model = bench.model;
  if (method.dropout) {
    if (out.model.arch == Arch::micro_cnn)
      out.model.classifier_dropout = method.dropout_rate;
    else
      out.model.hidden_dropout = method.dropout_rate;
  }
  if (method.dropfilter) {
    require(out.model.arch == Arch::micro_cnn, ErrorCode::config, "dropfilter needs a convolutional model");
    out.model.dropfilter_rate = method.dropout_rate;
  }
  if (method.uses_swap_rate()) {
    MixoutConfig mc = method.mixout_config;
    mc.swap_rate = swap_rate;
    mc.seed = seed;
    out.mixout = mc;
  }

  Trainer trainer{bench, method, out.model, data, held_out, out.mixout, {}};
  for (std::size_t d = 0; d < data.full.size(); ++d)
    if (static_cast<int>(d) != held_out) trainer.sources.push_back(d);

  const RngStream run(seed, run_label(bench, global_seed) + "/h" + std::to_string(held_out));
  const std::string mixout_label = run_label(bench, global_seed) + "/mixout/h" + std::to_string(held_out);
  auto prepare = [&](const RngStream& stream) {
    ParamStore store = pretrained.store;
    reset_head(store, out.model, stream.derive("head"));
    adopt_pretrained(store);
    if (method.lora) store = lora_wrap(store, out.model, method.lora_rank, stream.derive("lora"));
    return store;
  };

  const std::size_t members = method.ensemble || method.diwa ? method.members : 1;
  std::vector<ParamStore> evals;
  if (members == 1) {
    out.store = trainer.train_member(prepare(run), run, mixout_label);
  } else {
    for (std::size_t m = 0; m < members; ++m) {
      const RngStream member = run.derive("member" + std::to_string(m));
      out.members.push_back(trainer.train_member(prepare(member), member, mixout_label + "/m" + std::to_string(m)));
    }
    if (method.diwa) out.store = weight_average(out.members);
  }

  std::optional<MaskRealization> fixed;
  if (method.fixed_mixout) {
    MixoutConfig mc = *out.mixout;
    mc.rng_label = mixout_label;
    fixed = fixed_mixout_masks(mc, out.store, run.derive("fixed"));
  }
  auto logits = [&](const Tensor& x) {
    if (method.ensemble) {
      std::vector<ParamStore> ev;
      for (const auto& m : out.members) ev.push_back(trainer.eval_store(m, nullptr));
      return deep_ensemble_predict(ev, out.model, x);
    }
    return forward(trainer.eval_store(out.store, fixed ? &*fixed : nullptr), out.model, x);
  };

  std::vector<const Dataset*> val_parts;
  for (auto d : trainer.sources) val_parts.push_back(&data.val[d]);
  const Dataset val = concat(val_parts);
  const Dataset& target = data.full[static_cast<std::size_t>(held_out)];
  for (int tag : target.domain)
    require(tag == held_out, ErrorCode::state, "held-out split contains a source sample");

  RunRecord& r = out.record;
  r.benchmark = bench.name;
  r.method = method.name;
  if (method.uses_swap_rate()) {
    r.swap_rate = swap_rate;
    r.scaling_mode = to_string(out.mixout->scaling_mode);
    r.granularity = out.model.arch == Arch::micro_cnn ? "filter" : to_string(out.model.dense_granularity);
  }
  r.seed = seed;
  r.held_out_domain = held_out;
  r.step_count = bench.train.steps;
  r.in_acc = accuracy(logits(val.x), val.y);
  r.ood_acc = accuracy(logits(target.x), target.y);
  if (method.ensemble) {
    double s = 0.0;
    for (const auto& m : out.members) s += theta_distance(trainer.eval_store(m, nullptr));
    r.theta_dist = s / static_cast<double>(out.members.size());
  } else {
    r.theta_dist = theta_distance(trainer.eval_store(out.store, fixed ? &*fixed : nullptr));
  }
  out.val_acc = r.in_acc;
  if (timing)
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  if (out.mixout) out.mixout->rng_label = mixout_label;
  return out;
}

ProtocolResult run_protocol(const Benchmark& bench, const MethodConfig& method, const std::vector<std::uint64_t>& seeds,
                            const ProtocolOptions& options) {
  method.validate();
  bench.domains.validate();
  require(bench.domains.domains() >= 3, ErrorCode::config, "leave-one-out needs at least three domains");
  require(!seeds.empty(), ErrorCode::config, "at least one seed is required");
  std::vector<int> held = options.held_out;
  if (held.empty())
    for (std::size_t d = 0; d < bench.domains.domains(); ++d) held.push_back(static_cast<int>(d));

  PretrainCache local;
  PretrainCache& cache = options.cache ? *options.cache : local;
  ProtocolResult result;
  result.benchmark = bench.name;
  result.method = method.name;
  result.records.resize(seeds.size() * held.size());

  parallel_for(result.records.size(), options.threads, [&](std::size_t i) {
    const std::uint64_t seed = seeds[i / held.size()];
    const int h = held[i % held.size()];
    const auto t0 = std::chrono::steady_clock::now();
    const auto pre = cache.get(bench, seed, options.global_seed);
    const SeedData data = make_seed_data(bench, seed, options.global_seed);
    std::optional<FineTuneResult> best;
    std::vector<std::pair<double, double>> selection;
    for (double s : method.candidate_rates()) {
      FineTuneResult ft = fine_tune(bench, method, *pre, data, seed, options.global_seed, h, s, false);
      selection.emplace_back(s, ft.val_acc);
      if (!best || ft.val_acc > best->val_acc) best = std::move(ft);
    }
    RunRecord rec = best->record;
    rec.selection = selection;
    if (method.mixout && bench.train.diagnostics && best->mixout && best->mixout->swap_rate > 0.0 &&
        best->mixout->keep() > 0.0) {
      std::vector<const Dataset*> val_parts;
      for (std::size_t d = 0; d < data.val.size(); ++d)
        if (static_cast<int>(d) != h) val_parts.push_back(&data.val[d]);
      const Dataset val = concat(val_parts);
      const std::size_t pairs = bench.train.disagreement_pairs;
      rec.disagreement_in = subnetwork_disagreement(best->store, best->model, *best->mixout,
                                                    stride_rows(val, bench.train.diag_samples), pairs);
      rec.disagreement_ood = subnetwork_disagreement(
          best->store, best->model, *best->mixout,
          stride_rows(data.full[static_cast<std::size_t>(h)], bench.train.diag_samples), pairs);
    }
    if (options.timing)
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (options.on_run) {
      best->record = rec;
      options.on_run(i, *best);
    }
    result.records[i] = std::move(rec);
  });
  return result;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  std::vector<std::exception_ptr> errors(n);
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n && !failed; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
            failed = true;
          }
        }
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::size_t default_threads() {
  if (const char* env = std::getenv("MIXLAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : hc;
}

}  // namespace mixlab
