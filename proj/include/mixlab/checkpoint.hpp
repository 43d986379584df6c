// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>

#include "mixlab/model.hpp"

namespace mixlab {

/// On-disk layout:
///   "MIXLAB1\n"                       8-byte magic
///   uint64 little-endian               header length H
///   H bytes of JSON                    version, spec, seed, step, and per
///                                      parameter name/shape/offsets
///   payload                            raw little-endian float64 arrays
/// Values are stored as float64, so every theta round-trips bitwise.
inline constexpr char kCheckpointMagic[] = "MIXLAB1\n";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelSpec spec;
  ParamStore store;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

void save_checkpoint(const ParamStore& store, const ModelSpec& spec, const std::string& path,
                     std::uint64_t seed = 0, std::uint64_t step = 0);
Checkpoint load_checkpoint(const std::string& path);
/// Loads and checks the stored parameters against the layout of `expected`;
/// the error names the first parameter that is missing or mis-shaped.
Checkpoint load_checkpoint(const std::string& path, const ModelSpec& expected);

std::string spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const std::string& text);

/// Write `bytes` to `path` through a temporary file and rename.
void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace mixlab
