// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#include "mixlab/rng.hpp"

#include <cmath>
#include <numbers>

namespace mixlab {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

RngStream::RngStream(std::uint64_t seed, std::string label, std::uint64_t counter)
    : seed_(seed), label_(std::move(label)), counter_(counter) {
  key_ = mix64(mix64(seed_ + kGolden) ^ fnv1a64(label_));
}

std::uint64_t RngStream::at(std::uint64_t counter) const noexcept {
  // Two keyed rounds of the splitmix finalizer over the counter.
  std::uint64_t z = mix64(key_ + (counter + 1) * kGolden);
  return mix64(z ^ (key_ >> 1) ^ 0xD1B54A32D192ED03ULL);
}

std::uint64_t RngStream::next_u64() noexcept { return at(counter_++); }

double RngStream::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() noexcept {
  double u1 = uniform();
  double u2 = uniform();
  // u1 in (0,1] so the log is finite.
  double r = std::sqrt(-2.0 * std::log(1.0 - u1));
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::below(std::uint64_t n) noexcept {
  // Lemire-style multiply-shift; bias is < n / 2^64, negligible here.
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

RngStream RngStream::derive(std::string_view sub) const {
  std::string label = label_;
  label += '/';
  label += sub;
  return RngStream(seed_, std::move(label));
}

Tensor bernoulli_mask(RngStream& stream, const Shape& shape, double swap_rate) {
  require(swap_rate >= 0.0 && swap_rate <= 1.0, ErrorCode::invalid_argument,
          "swap rate must lie in [0,1], got " + std::to_string(swap_rate));
  Tensor mask(shape, DType::f64);
  for (auto& v : mask.data()) v = stream.uniform() < swap_rate ? 0.0 : 1.0;
  return mask;
}

}  // namespace mixlab
