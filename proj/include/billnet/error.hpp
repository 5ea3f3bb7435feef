// Copyright 2026 The billnet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace billnet {

enum class ErrorKind {
  kNonBinaryInput,
  kShapeMismatch,
  kInvariantViolation,
  kBadGrouping,
  kNonBinarySelect,
  kZeroScale,
  kNotFullyQuantized,
  kSlotTypeMismatch,
  kDisconnectedGraph,
  kStageOrderViolation,
  kBadConfig,
  kCorruptFile,
  kVersionMismatch,
  kMissingFrames,
  kBadResolution,
  kIo,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}
inline void require(bool cond, ErrorKind kind, const char* what) {
  if (!cond) fail(kind, what);
}

}  // namespace billnet
