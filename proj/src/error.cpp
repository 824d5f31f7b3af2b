// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptfuse/error.hpp"

namespace promptfuse {

std::string_view category_name(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::kInvalidArgument: return "invalid-argument";
    case ErrorCategory::kShapeMismatch: return "shape-mismatch";
    case ErrorCategory::kNumerical: return "numerical";
    case ErrorCategory::kIo: return "io";
    case ErrorCategory::kBadMagic: return "bad-magic";
    case ErrorCategory::kVersionMismatch: return "version-mismatch";
    case ErrorCategory::kTruncated: return "truncated";
    case ErrorCategory::kFingerprintMismatch: return "fingerprint-mismatch";
    case ErrorCategory::kWidthMismatch: return "width-mismatch";
    case ErrorCategory::kConfig: return "config";
    case ErrorCategory::kMissingCheckpoint: return "missing-checkpoint";
    case ErrorCategory::kInfeasible: return "infeasible";
    case ErrorCategory::kGraphState: return "graph-state";
  }
  return "unknown";
}

int exit_code(ErrorCategory category) {
  return 10 + static_cast<int>(category);
}

}  // namespace promptfuse
