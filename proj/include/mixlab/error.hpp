// Copyright (c) 2026, mixlab developers
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mixlab {

enum class ErrorCode {
  invalid_argument,
  shape_mismatch,
  non_finite,
  format,
  io,
  config,
  state,
  divergence,
};

const char* error_code_name(ErrorCode code) noexcept;

/// Every failure inside the core is reported as a MixlabError. The C API maps
/// the code onto mixlab_status.
class MixlabError : public std::runtime_error {
 public:
  MixlabError(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw MixlabError(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace mixlab
