// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace mixlab {

using nlohmann::json;

namespace {

constexpr std::size_t kMagicLen = 8;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

json spec_json(const ModelSpec& s) {
  return json{{"arch", to_string(s.arch)},
              {"input_dim", s.input_dim},
              {"hidden", s.hidden},
              {"in_channels", s.in_channels},
              {"image_size", s.image_size},
              {"conv_channels", s.conv_channels},
              {"tokens", s.tokens},
              {"dim", s.dim},
              {"mlp_dim", s.mlp_dim},
              {"classes", s.classes},
              {"activation", to_string(s.activation)},
              {"dense_granularity", to_string(s.dense_granularity)},
              {"linear_bias", s.linear_bias},
              {"mix_biases", s.mix_biases},
              {"mix_norms", s.mix_norms},
              {"classifier_dropout", s.classifier_dropout},
              {"hidden_dropout", s.hidden_dropout},
              {"dropfilter_rate", s.dropfilter_rate}};
}

ModelSpec spec_from(const json& j) {
  ModelSpec s;
  s.arch = parse_arch(j.at("arch").get<std::string>());
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  s.in_channels = j.at("in_channels").get<std::size_t>();
  s.image_size = j.at("image_size").get<std::size_t>();
  s.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
  s.tokens = j.at("tokens").get<std::size_t>();
  s.dim = j.at("dim").get<std::size_t>();
  s.mlp_dim = j.at("mlp_dim").get<std::size_t>();
  s.classes = j.at("classes").get<std::size_t>();
  s.activation = parse_activation(j.at("activation").get<std::string>());
  s.dense_granularity = parse_granularity(j.at("dense_granularity").get<std::string>());
  s.linear_bias = j.at("linear_bias").get<bool>();
  s.mix_biases = j.at("mix_biases").get<bool>();
  s.mix_norms = j.at("mix_norms").get<bool>();
  s.classifier_dropout = j.at("classifier_dropout").get<double>();
  s.hidden_dropout = j.at("hidden_dropout").get<double>();
  s.dropfilter_rate = j.at("dropfilter_rate").get<double>();
  return s;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string spec_to_json(const ModelSpec& spec) { return spec_json(spec).dump(); }

ModelSpec spec_from_json(const std::string& text) {
  try {
    return spec_from(json::parse(text));
  } catch (const json::exception& e) {
    fail(ErrorCode::format, std::string("model spec json: ") + e.what());
  }
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorCode::io, "short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  require(!ec, ErrorCode::io, "cannot rename '" + tmp.string() + "' to '" + path + "': " + ec.message());
}

void save_checkpoint(const ParamStore& store, const ModelSpec& spec, const std::string& path, std::uint64_t seed,
                     std::uint64_t step) {
  std::string payload;
  json params = json::array();
  auto put_tensor = [&payload](const Tensor& t) {
    json loc{{"offset", payload.size()}, {"bytes", t.size() * 8}};
    for (double v : t.data()) put_f64(payload, v);
    return loc;
  };
  for (const auto& name : store.names()) {
    const MixParam& p = store.at(name);
    json entry{{"name", name},
               {"shape", p.theta.shape()},
               {"dtype", dtype_name(p.theta.dtype())},
               {"kind", to_string(p.kind)},
               {"layer", p.layer},
               {"granularity", to_string(p.granularity)},
               {"head", p.head},
               {"eligible", p.eligible},
               {"trainable", p.trainable}};
    entry["theta"] = put_tensor(p.theta);
    entry["theta0"] = p.theta0 ? put_tensor(*p.theta0) : json(nullptr);
    params.push_back(std::move(entry));
  }
  json header{{"format_version", kCheckpointVersion},
              {"spec", spec_json(spec)},
              {"seed", seed},
              {"step", step},
              {"payload_bytes", payload.size()},
              {"params", std::move(params)}};
  const std::string head = header.dump();
  std::string bytes(kCheckpointMagic, kMagicLen);
  put_u64(bytes, head.size());
  bytes += head;
  bytes += payload;
  write_file_atomic(path, bytes);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  require(bytes.size() >= kMagicLen + 8 && std::memcmp(bytes.data(), kCheckpointMagic, kMagicLen) == 0,
          ErrorCode::format, "'" + path + "' is not a mixlab checkpoint (bad magic)");
  const std::uint64_t head_len = get_u64(bytes, kMagicLen);
  const std::size_t payload_at = kMagicLen + 8 + head_len;
  require(head_len <= bytes.size() && payload_at <= bytes.size(), ErrorCode::format,
          "'" + path + "' is truncated inside the header");
  json header;
  try {
    header = json::parse(bytes.substr(kMagicLen + 8, head_len));
  } catch (const json::exception& e) {
    fail(ErrorCode::format, "'" + path + "' has a corrupt header: " + e.what());
  }

  Checkpoint ck;
  try {
    const int version = header.at("format_version").get<int>();
    require(version == kCheckpointVersion, ErrorCode::format,
            "'" + path + "' has format version " + std::to_string(version) + ", expected " +
                std::to_string(kCheckpointVersion));
    const std::uint64_t payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    require(bytes.size() - payload_at == payload_bytes, ErrorCode::format,
            "'" + path + "' is truncated: payload has " + std::to_string(bytes.size() - payload_at) + " of " +
                std::to_string(payload_bytes) + " bytes");
    ck.spec = spec_from(header.at("spec"));
    ck.seed = header.at("seed").get<std::uint64_t>();
    ck.step = header.at("step").get<std::uint64_t>();

    for (const auto& entry : header.at("params")) {
      const auto name = entry.at("name").get<std::string>();
      const Shape shape = entry.at("shape").get<Shape>();
      const DType dtype = parse_dtype(entry.at("dtype").get<std::string>());
      auto read_tensor = [&](const json& loc) {
        const std::uint64_t off = loc.at("offset").get<std::uint64_t>();
        const std::uint64_t len = loc.at("bytes").get<std::uint64_t>();
        require(len == numel(shape) * 8 && off + len <= payload_bytes, ErrorCode::format,
                "'" + path + "': bad extent for parameter '" + name + "'");
        std::vector<double> data(numel(shape));
        for (std::size_t i = 0; i < data.size(); ++i)
          data[i] = std::bit_cast<double>(get_u64(bytes, payload_at + off + 8 * i));
        return Tensor(shape, std::move(data), dtype);
      };
      MixParam p;
      p.theta = read_tensor(entry.at("theta"));
      if (!entry.at("theta0").is_null()) p.theta0 = read_tensor(entry.at("theta0"));
      p.kind = parse_param_kind(entry.at("kind").get<std::string>());
      p.layer = entry.at("layer").get<std::string>();
      p.granularity = parse_granularity(entry.at("granularity").get<std::string>());
      p.head = entry.at("head").get<bool>();
      p.eligible = entry.at("eligible").get<bool>();
      p.trainable = entry.at("trainable").get<bool>();
      ck.store.add(name, std::move(p));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::format, "'" + path + "' has a malformed header: " + e.what());
  }
  return ck;
}

Checkpoint load_checkpoint(const std::string& path, const ModelSpec& expected) {
  Checkpoint ck = load_checkpoint(path);
  for (const auto& info : param_layout(expected)) {
    const MixParam* p = ck.store.find(info.name);
    require(p != nullptr, ErrorCode::shape_mismatch,
            "checkpoint '" + path + "' does not match the model: parameter '" + info.name + "' is missing");
    require(p->theta.shape() == info.shape, ErrorCode::shape_mismatch,
            "checkpoint '" + path + "' does not match the model: parameter '" + info.name + "' has shape " +
                shape_str(p->theta.shape()) + ", expected " + shape_str(info.shape));
  }
  return ck;
}

}  // namespace mixlab
