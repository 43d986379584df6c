// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace mixlab {

std::size_t ExperimentConfig::effective_threads() const { return threads > 0 ? threads : default_threads(); }

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  require(ec == std::errc(), ErrorCode::invalid_argument, "cannot format number");
  return std::string(buf, end);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

// Where a value came from, for error messages.
struct Site {
  std::string origin;
  int line = 0;
  std::string key;

  [[noreturn]] void error(const std::string& msg) const {
    fail(ErrorCode::config, origin + ":" + std::to_string(line) + ": " + msg);
  }
};

double to_double(const std::string& v, const Site& site) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
    site.error("key '" + site.key + "' expects a number, got '" + v + "'");
  return out;
}

std::uint64_t to_uint(const std::string& v, const Site& site) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size())
    site.error("key '" + site.key + "' expects a non-negative integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& v, const Site& site) {
  if (v == "true") return true;
  if (v == "false") return false;
  site.error("key '" + site.key + "' expects true or false, got '" + v + "'");
}

void check_range(double v, double lo, double hi, bool hi_open, const Site& site) {
  if (v < lo || v > hi || (hi_open && v == hi))
    site.error(site.key + " = " + format_double(v) + " is out of range [" + format_double(lo) + "," +
               format_double(hi) + (hi_open ? ")" : "]"));
}

template <class T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + f(v[i]);
  return out;
}

struct Key {
  std::string section;
  std::string name;
  std::function<void(ExperimentConfig&, const std::string&, const Site&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

using DoubleRef = std::function<double&(ExperimentConfig&)>;
using SizeRef = std::function<std::size_t&(ExperimentConfig&)>;
using BoolRef = std::function<bool&(ExperimentConfig&)>;

Key real(const char* sec, const char* name, DoubleRef ref, double lo, double hi, bool hi_open = false) {
  return {sec, name,
          [=](ExperimentConfig& c, const std::string& v, const Site& s) {
            const double d = to_double(v, s);
            check_range(d, lo, hi, hi_open, s);
            ref(c) = d;
          },
          [=](const ExperimentConfig& c) { return format_double(ref(const_cast<ExperimentConfig&>(c))); }};
}

Key count(const char* sec, const char* name, SizeRef ref, std::size_t lo, std::size_t hi = SIZE_MAX) {
  return {sec, name,
          [=](ExperimentConfig& c, const std::string& v, const Site& s) {
            const std::uint64_t n = to_uint(v, s);
            if (n < lo || n > hi)
              s.error(s.key + " = " + v + " is out of range [" + std::to_string(lo) + "," + std::to_string(hi) + "]");
            ref(c) = n;
          },
          [=](const ExperimentConfig& c) { return std::to_string(ref(const_cast<ExperimentConfig&>(c))); }};
}

Key flag(const char* sec, const char* name, BoolRef ref) {
  return {sec, name, [=](ExperimentConfig& c, const std::string& v, const Site& s) { ref(c) = to_bool(v, s); },
          [=](const ExperimentConfig& c) { return std::string(ref(const_cast<ExperimentConfig&>(c)) ? "true" : "false"); }};
}

// Runs `f`, turning library errors into config errors at `site`.
template <class F>
auto at_site(const Site& site, F f) {
  try {
    return f();
  } catch (const MixlabError& e) {
    site.error(std::string(e.what()));
  }
}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    // [experiment]
    k.push_back({"experiment", "benchmark", nullptr, [](const ExperimentConfig& c) { return c.benchmark; }});
    k.push_back({"experiment", "method", nullptr, [](const ExperimentConfig& c) { return c.method; }});
    k.push_back({"experiment", "seeds",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) {
                   c.seeds.clear();
                   for (const auto& item : split_list(v)) c.seeds.push_back(to_uint(item, s));
                   if (c.seeds.empty()) s.error("seeds must list at least one seed");
                   std::set<std::uint64_t> uniq(c.seeds.begin(), c.seeds.end());
                   if (uniq.size() != c.seeds.size()) s.error("seeds must be distinct");
                 },
                 [](const ExperimentConfig& c) {
                   return join<std::uint64_t>(c.seeds, [](const std::uint64_t& x) { return std::to_string(x); });
                 }});
    k.push_back({"experiment", "output_dir",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) {
                   if (v.empty()) s.error("output_dir must not be empty");
                   c.output_dir = v;
                 },
                 [](const ExperimentConfig& c) { return c.output_dir; }});
    k.push_back({"experiment", "global_seed",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) { c.global_seed = to_uint(v, s); },
                 [](const ExperimentConfig& c) { return std::to_string(c.global_seed); }});
    k.push_back(count("experiment", "threads", [](ExperimentConfig& c) -> std::size_t& { return c.threads; }, 0, 1024));
    k.push_back(flag("experiment", "timing", [](ExperimentConfig& c) -> bool& { return c.timing; }));
    k.push_back(flag("experiment", "save_checkpoints", [](ExperimentConfig& c) -> bool& { return c.save_checkpoints; }));

    // [data]
    k.push_back({"data", "domains",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) {
                   c.bench.domains.domain_params.clear();
                   for (const auto& item : split_list(v)) c.bench.domains.domain_params.push_back(to_double(item, s));
                   if (c.bench.domains.domain_params.size() < 3) s.error("domains must list at least three domains");
                 },
                 [](const ExperimentConfig& c) {
                   return join<double>(c.bench.domains.domain_params, [](const double& x) { return format_double(x); });
                 }});
    k.push_back(count("data", "samples_per_domain",
                      [](ExperimentConfig& c) -> std::size_t& { return c.bench.domains.samples_per_domain; }, 10,
                      1000000));
    k.push_back(count("data", "classes", [](ExperimentConfig& c) -> std::size_t& { return c.bench.domains.classes; }, 2, 64));
    k.push_back(real("data", "noise", [](ExperimentConfig& c) -> double& { return c.bench.domains.noise; }, 0.0, 100.0));
    k.push_back(count("data", "core_dim", [](ExperimentConfig& c) -> std::size_t& { return c.bench.domains.core_dim; }, 1, 4096));
    k.push_back(count("data", "spurious_dim",
                      [](ExperimentConfig& c) -> std::size_t& { return c.bench.domains.spurious_dim; }, 1, 4096));
    k.push_back(count("data", "image_size",
                      [](ExperimentConfig& c) -> std::size_t& { return c.bench.domains.image_size; }, 8, 128));
    k.push_back({"data", "mechanism_seed",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) {
                   c.bench.domains.mechanism_seed = to_uint(v, s);
                 },
                 [](const ExperimentConfig& c) { return std::to_string(c.bench.domains.mechanism_seed); }});

    // [model]
    k.push_back({"model", "arch",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) {
                   c.bench.model.arch = at_site(s, [&] { return parse_arch(v); });
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.bench.model.arch)); }});
    k.push_back({"model", "hidden",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) {
                   c.bench.model.hidden.clear();
                   for (const auto& item : split_list(v)) c.bench.model.hidden.push_back(to_uint(item, s));
                 },
                 [](const ExperimentConfig& c) {
                   return join<std::size_t>(c.bench.model.hidden, [](const std::size_t& x) { return std::to_string(x); });
                 }});
    k.push_back({"model", "conv_channels",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) {
                   c.bench.model.conv_channels.clear();
                   for (const auto& item : split_list(v)) c.bench.model.conv_channels.push_back(to_uint(item, s));
                   if (c.bench.model.conv_channels.size() != 2) s.error("conv_channels takes exactly two widths");
                 },
                 [](const ExperimentConfig& c) {
                   return join<std::size_t>(c.bench.model.conv_channels,
                                            [](const std::size_t& x) { return std::to_string(x); });
                 }});
    k.push_back(count("model", "tokens", [](ExperimentConfig& c) -> std::size_t& { return c.bench.model.tokens; }, 1, 4096));
    k.push_back(count("model", "dim", [](ExperimentConfig& c) -> std::size_t& { return c.bench.model.dim; }, 1, 4096));
    k.push_back(count("model", "mlp_dim", [](ExperimentConfig& c) -> std::size_t& { return c.bench.model.mlp_dim; }, 1, 4096));
    k.push_back({"model", "activation",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) {
                   c.bench.model.activation = at_site(s, [&] { return parse_activation(v); });
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.bench.model.activation)); }});
    k.push_back(flag("model", "mix_biases", [](ExperimentConfig& c) -> bool& { return c.bench.model.mix_biases; }));
    k.push_back(flag("model", "mix_norms", [](ExperimentConfig& c) -> bool& { return c.bench.model.mix_norms; }));
    k.push_back(real("model", "classifier_dropout",
                     [](ExperimentConfig& c) -> double& { return c.bench.model.classifier_dropout; }, 0.0, 1.0, true));

    // [pretrain]
    k.push_back(count("pretrain", "steps", [](ExperimentConfig& c) -> std::size_t& { return c.bench.pretrain.steps; }, 0));
    k.push_back(count("pretrain", "batch", [](ExperimentConfig& c) -> std::size_t& { return c.bench.pretrain.batch; }, 1));
    k.push_back(count("pretrain", "samples",
                      [](ExperimentConfig& c) -> std::size_t& { return c.bench.pretrain.samples; }, 10));
    k.push_back(real("pretrain", "lr", [](ExperimentConfig& c) -> double& { return c.bench.pretrain.lr; }, 1e-12, 10.0));

    // [training]
    k.push_back(count("training", "steps", [](ExperimentConfig& c) -> std::size_t& { return c.bench.train.steps; }, 1));
    k.push_back(count("training", "batch_per_domain",
                      [](ExperimentConfig& c) -> std::size_t& { return c.bench.train.batch_per_domain; }, 1));
    k.push_back(real("training", "lr", [](ExperimentConfig& c) -> double& { return c.bench.train.optimizer.lr; }, 1e-12,
                     10.0));
    k.push_back({"training", "optimizer",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) {
                   c.bench.train.optimizer.kind = at_site(s, [&] { return parse_optimizer(v); });
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.bench.train.optimizer.kind)); }});
    k.push_back(real("training", "weight_decay",
                     [](ExperimentConfig& c) -> double& { return c.bench.train.optimizer.weight_decay; }, 0.0, 10.0));
    k.push_back(real("training", "val_fraction",
                     [](ExperimentConfig& c) -> double& { return c.bench.train.val_fraction; }, 0.01, 0.99));
    k.push_back({"training", "checkpoint_selection",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) {
                   c.bench.train.selection = at_site(s, [&] { return parse_checkpoint_selection(v); });
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.bench.train.selection)); }});
    k.push_back(count("training", "eval_every",
                      [](ExperimentConfig& c) -> std::size_t& { return c.bench.train.eval_every; }, 1));

    // [mixout]
    k.push_back(real("mixout", "swap_rate",
                     [](ExperimentConfig& c) -> double& { return c.method_config.mixout_config.swap_rate; }, 0.0, 1.0));
    k.push_back({"mixout", "swap_rate_grid",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) {
                   c.method_config.swap_rate_grid.clear();
                   for (const auto& item : split_list(v)) {
                     Site at = s;
                     const double r = to_double(item, at);
                     check_range(r, 0.0, 1.0, false, at);
                     c.method_config.swap_rate_grid.push_back(r);
                   }
                 },
                 [](const ExperimentConfig& c) {
                   return join<double>(c.method_config.swap_rate_grid, [](const double& x) { return format_double(x); });
                 }});
    k.push_back({"mixout", "scaling_mode",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) {
                   c.method_config.mixout_config.scaling_mode = at_site(s, [&] { return parse_scaling_mode(v); });
                 },
                 [](const ExperimentConfig& c) {
                   return std::string(to_string(c.method_config.mixout_config.scaling_mode));
                 }});
    k.push_back({"mixout", "granularity",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) {
                   const Granularity g = at_site(s, [&] { return parse_granularity(v); });
                   if (g == Granularity::filter)
                     s.error("granularity applies to dense layers (element or neuron); conv layers always use filter");
                   c.bench.model.dense_granularity = g;
                 },
                 [](const ExperimentConfig& c) { return std::string(to_string(c.bench.model.dense_granularity)); }});

    // [regularizer]
    k.push_back(real("regularizer", "dropout_rate",
                     [](ExperimentConfig& c) -> double& { return c.method_config.dropout_rate; }, 0.0, 1.0, true));
    k.push_back(real("regularizer", "l2sp_coeff",
                     [](ExperimentConfig& c) -> double& { return c.method_config.l2sp_coeff; }, 0.0, 1e6));
    k.push_back(real("regularizer", "ma_start",
                     [](ExperimentConfig& c) -> double& { return c.method_config.ma_start_fraction; }, 0.0, 1.0, true));
    k.push_back(real("regularizer", "lpft_boundary",
                     [](ExperimentConfig& c) -> double& { return c.method_config.lpft_fraction; }, 0.0, 1.0));
    k.push_back(count("regularizer", "lora_rank",
                      [](ExperimentConfig& c) -> std::size_t& { return c.method_config.lora_rank; }, 1, 4096));
    k.push_back(count("regularizer", "members",
                      [](ExperimentConfig& c) -> std::size_t& { return c.method_config.members; }, 1, 64));

    // [diagnostics]
    k.push_back(flag("diagnostics", "enabled", [](ExperimentConfig& c) -> bool& { return c.diagnostics.enabled; }));
    k.push_back(count("diagnostics", "samples",
                      [](ExperimentConfig& c) -> std::size_t& { return c.bench.train.diag_samples; }, 1));
    k.push_back(count("diagnostics", "pairs",
                      [](ExperimentConfig& c) -> std::size_t& { return c.bench.train.disagreement_pairs; }, 1, 10000));
    k.push_back({"diagnostics", "mc_ks",
                 [](ExperimentConfig& c, const std::string& v, const Site& s) {
                   c.diagnostics.mc_ks.clear();
                   for (const auto& item : split_list(v)) {
                     const auto n = to_uint(item, s);
                     if (n < 1) s.error("mc_ks entries must be >= 1");
                     c.diagnostics.mc_ks.push_back(static_cast<std::int64_t>(n));
                   }
                 },
                 [](const ExperimentConfig& c) {
                   return join<std::int64_t>(c.diagnostics.mc_ks, [](const std::int64_t& x) { return std::to_string(x); });
                 }});
    k.push_back(count("diagnostics", "cost_lora_rank",
                      [](ExperimentConfig& c) -> std::size_t& { return c.cost_lora_rank; }, 1, 4096));
    return k;
  }();
  return table;
}

const char* const kSections[] = {"experiment", "data", "model", "pretrain", "training", "mixout", "regularizer",
                                 "diagnostics"};

struct Line {
  std::string value;
  Site site;
};

}  // namespace

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
  std::map<std::string, const Key*> index;
  for (const auto& k : keys()) index.emplace(k.section + "." + k.name, &k);

  std::map<std::string, Line> entries;
  std::vector<std::string> order;
  std::string section = "experiment";
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    Site site{origin, lineno, ""};
    if (line.front() == '[') {
      if (line.back() != ']') site.error("malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const char* s : kSections) known = known || section == s;
      if (!known) site.error("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) site.error("expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    site.key = key;
    const std::string full = section + "." + key;
    if (!index.contains(full)) site.error("unknown key '" + key + "' in [" + section + "]");
    if (entries.contains(full))
      site.error("duplicate key '" + key + "' (first set on line " + std::to_string(entries.at(full).site.line) + ")");
    entries.emplace(full, Line{trim(line.substr(eq + 1)), site});
    order.push_back(full);
  }

  for (const char* required : {"experiment.benchmark", "experiment.method", "experiment.seeds"})
    if (!entries.contains(required))
      fail(ErrorCode::config, origin + ": missing required key '" + std::string(required).substr(11) + "'");

  ExperimentConfig c;
  const Line& bench = entries.at("experiment.benchmark");
  c.benchmark = bench.value;
  c.bench = at_site(bench.site, [&] { return builtin_benchmark(bench.value); });
  const Line& method = entries.at("experiment.method");
  c.method = method.value;
  c.method_config = at_site(method.site, [&] { return parse_method(method.value); });

  for (const auto& full : order) {
    const Key* k = index.at(full);
    if (!k->set) continue;
    const Line& l = entries.at(full);
    k->set(c, l.value, l.site);
  }

  if (const char* env = std::getenv("MIXLAB_SEED")) {
    std::uint64_t v = 0;
    const std::string s(env);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    require(!s.empty() && ec == std::errc() && p == s.data() + s.size(), ErrorCode::config,
            "MIXLAB_SEED must be a non-negative integer, got '" + s + "'");
    c.global_seed = v;
  }

  // Derived model extents follow the data.
  ModelSpec& m = c.bench.model;
  m.classes = c.bench.domains.classes;
  switch (m.arch) {
    case Arch::linear:
    case Arch::mlp: m.input_dim = c.bench.domains.input_size(); break;
    case Arch::micro_cnn:
      m.in_channels = 1;
      m.image_size = c.bench.domains.image_size;
      break;
    case Arch::micro_attn: break;
  }
  try {
    c.bench.domains.validate();
    m.validate();
    require(m.input_size() == c.bench.domains.input_size(), ErrorCode::config,
            "model expects " + std::to_string(m.input_size()) + " features per sample, benchmark produces " +
                std::to_string(c.bench.domains.input_size()));
    if (c.bench.domains.generator == Generator::textured_shapes)
      require(m.arch == Arch::micro_cnn, ErrorCode::config, "textured_shapes needs arch = micro_cnn");
    c.method_config.validate();
    if (c.method_config.dropfilter)
      require(m.arch == Arch::micro_cnn, ErrorCode::config, "dropfilter needs arch = micro_cnn");
  } catch (const MixlabError& e) {
    fail(ErrorCode::config, origin + ": " + e.what());
  }
  c.bench.train.diagnostics = c.diagnostics.enabled;
  return c;
}

ExperimentConfig parse_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

std::string resolved_config_text(const ExperimentConfig& config) {
  std::string out = "# mixlab resolved configuration\n";
  for (const char* section : kSections) {
    out += std::string(section == kSections[0] ? "" : "\n") + "[" + section + "]\n";
    for (const auto& k : keys()) {
      if (k.section != section) continue;
      const std::string v = k.get(config);
      out += k.name + (v.empty() ? " =" : " = " + v) + "\n";
    }
  }
  return out;
}

std::vector<double> parse_grid(const std::string& text) {
  const std::string t = trim(text);
  std::vector<double> out;
  Site site{"--grid", 0, "grid"};
  auto bad = [&](const std::string& m) { fail(ErrorCode::config, "grid '" + text + "': " + m); };
  if (t.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(t);
    std::string p;
    while (std::getline(ss, p, ':')) parts.push_back(trim(p));
    if (parts.size() != 3) bad("expected start:stop:step");
    double a = 0, b = 0, step = 0;
    try {
      a = to_double(parts[0], site);
      b = to_double(parts[1], site);
      step = to_double(parts[2], site);
    } catch (const MixlabError&) {
      bad("bounds must be numbers");
    }
    if (!(step > 0.0)) bad("step must be positive");
    if (b < a) bad("stop must be >= start");
    const auto n = static_cast<std::size_t>(std::floor((b - a) / step + 1e-9));
    for (std::size_t i = 0; i <= n; ++i) out.push_back(std::round((a + static_cast<double>(i) * step) * 1e12) / 1e12);
  } else {
    for (const auto& item : split_list(t)) {
      try {
        out.push_back(to_double(item, site));
      } catch (const MixlabError&) {
        bad("'" + item + "' is not a number");
      }
    }
  }
  if (out.empty()) bad("no grid points");
  for (double v : out)
    if (v < 0.0 || v > 1.0) bad("point " + format_double(v) + " lies outside [0,1]");
  return out;
}

}  // namespace mixlab
