// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptfuse/params.hpp"

namespace promptfuse {

void ParameterStore::add(const std::string& name, Tensor<float> value) {
  if (name.empty()) fail(ErrorCategory::kInvalidArgument, "parameter name must not be empty");
  if (!params_.emplace(name, std::move(value)).second) {
    fail(ErrorCategory::kInvalidArgument, "duplicate parameter name '" + name + "'");
  }
}

Tensor<float>& ParameterStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) fail(ErrorCategory::kInvalidArgument, "unknown parameter '" + name + "'");
  return it->second;
}

const Tensor<float>& ParameterStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) fail(ErrorCategory::kInvalidArgument, "unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

std::uint64_t ParameterStore::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : params_) {
    h = fnv1a(std::as_bytes(std::span<const char>(name.data(), name.size())), h);
    h = hash_tensor(t, h);
  }
  return h;
}

std::uint64_t hash_parameters(const std::vector<const ParameterStore*>& stores,
                              const std::set<std::string>& names) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const std::string& name : names) {
    const Tensor<float>* found = nullptr;
    for (const ParameterStore* s : stores) {
      if (s->contains(name)) {
        found = &s->at(name);
        break;
      }
    }
    if (!found) fail(ErrorCategory::kInvalidArgument, "unknown parameter '" + name + "'");
    h = fnv1a(std::as_bytes(std::span<const char>(name.data(), name.size())), h);
    h = hash_tensor(*found, h);
  }
  return h;
}

Tensor<float> normal_tensor(std::size_t rows, std::size_t cols, float stddev,
                            std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, stddev);
  Tensor<float> t(rows, cols);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace promptfuse
