// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace promptfuse {

// Machine-parsable error categories. The CLI prints the category name and
// maps each to a distinct exit code.
enum class ErrorCategory {
  kInvalidArgument,
  kShapeMismatch,
  kNumerical,
  kIo,
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kFingerprintMismatch,
  kWidthMismatch,
  kConfig,
  kMissingCheckpoint,
  kInfeasible,
  kGraphState,
};

std::string_view category_name(ErrorCategory category);
int exit_code(ErrorCategory category);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const { return category_; }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory category, const std::string& message) {
  throw Error(category, message);
}

}  // namespace promptfuse
