// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptfuse/checkpoint.hpp"

#include <sstream>

#include "promptfuse/binary_io.hpp"

namespace promptfuse {

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  io::ByteWriter w;
  w.bytes("PFCK");
  w.u32(kCheckpointVersion);
  w.u64(checkpoint.fingerprint);
  w.u32(static_cast<std::uint32_t>(checkpoint.params.size()));
  for (const auto& [name, t] : checkpoint.params) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rows()));
    w.u32(static_cast<std::uint32_t>(t.cols()));
    for (float v : t.values()) w.f32(v);
  }
  return w.data();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  io::ByteReader r(bytes);
  if (r.remaining() < 4 || r.bytes(4) != "PFCK") fail(ErrorCategory::kBadMagic, "not a checkpoint file");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorCategory::kVersionMismatch, "checkpoint version " + std::to_string(version) +
                                              ", expected " + std::to_string(kCheckpointVersion));
  }
  Checkpoint out;
  out.fingerprint = r.u64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.u32());
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (static_cast<std::uint64_t>(rows) * cols * 4 > r.remaining()) {
      fail(ErrorCategory::kTruncated, "checkpoint tensor '" + name + "' is truncated");
    }
    Tensor<float> t(rows, cols);
    for (auto& v : t.values()) v = r.f32();
    out.params.add(name, std::move(t));
  }
  if (!r.at_end()) fail(ErrorCategory::kTruncated, "trailing bytes after checkpoint tensors");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  io::write_file(path.string(), serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_fingerprint) {
  if (!std::filesystem::exists(path)) {
    fail(ErrorCategory::kMissingCheckpoint, "checkpoint '" + path.string() + "' does not exist");
  }
  Checkpoint c = deserialize_checkpoint(io::read_file(path.string()));
  if (c.fingerprint != expected_fingerprint) {
    std::ostringstream msg;
    msg << "checkpoint '" << path.string() << "' has fingerprint " << std::hex << c.fingerprint
        << ", configuration expects " << expected_fingerprint;
    fail(ErrorCategory::kFingerprintMismatch, msg.str());
  }
  return c;
}

Checkpoint collect_checkpoint(const std::vector<const ParameterStore*>& stores,
                              const std::vector<std::string>& names, std::uint64_t fingerprint) {
  Checkpoint c;
  c.fingerprint = fingerprint;
  for (const auto& name : names) {
    bool found = false;
    for (const ParameterStore* s : stores) {
      if (s->contains(name)) {
        c.params.add(name, s->at(name));
        found = true;
        break;
      }
    }
    if (!found) fail(ErrorCategory::kInvalidArgument, "no parameter named '" + name + "'");
  }
  return c;
}

}  // namespace promptfuse
