// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

// Named-tensor checkpoints: "PFCK" magic, u32 version, u64 config
// fingerprint, u32 tensor count, then per tensor (in name order) u32 name
// length, name bytes, u32 rows, u32 cols and little-endian f32 values.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "promptfuse/params.hpp"

namespace promptfuse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t fingerprint = 0;
  ParameterStore params;
};

std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
// Throws kMissingCheckpoint when the file does not exist and
// kFingerprintMismatch when it was written for another configuration.
Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_fingerprint);

// Checkpoint of the named subset drawn from several stores.
Checkpoint collect_checkpoint(const std::vector<const ParameterStore*>& stores,
                              const std::vector<std::string>& names, std::uint64_t fingerprint);

}  // namespace promptfuse
