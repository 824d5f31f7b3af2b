// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "promptfuse/autodiff.hpp"
#include "promptfuse/tensor.hpp"

namespace promptfuse {

// Named parameter collection. Names are unique and stable; iteration order is
// lexicographic, which fixes checkpoint layout and hashing order.
class ParameterStore {
 public:
  void add(const std::string& name, Tensor<float> value);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Tensor<float>& at(const std::string& name);
  const Tensor<float>& at(const std::string& name) const;

  std::vector<std::string> names() const;
  std::size_t scalar_count() const;
  std::size_t size() const { return params_.size(); }

  std::uint64_t hash() const;

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }

 private:
  std::map<std::string, Tensor<float>> params_;
};

// Hash over the named subset drawn from several stores (order: by name).
std::uint64_t hash_parameters(const std::vector<const ParameterStore*>& stores,
                              const std::set<std::string>& names);

Tensor<float> normal_tensor(std::size_t rows, std::size_t cols, float stddev, std::mt19937_64& rng);

// Binds stored parameters into a graph on first use. Parameters selected by
// `requires_grad` become differentiable leaves; all others are constants.
// Overrides substitute a value for one name (used by gradient checks that must
// perturb parameters in verification precision).
template <typename T>
class Binding {
 public:
  using Selector = std::function<bool(const std::string&)>;

  Binding(ad::Graph<T>& graph, std::vector<const ParameterStore*> stores, Selector requires_grad = {})
      : graph_(&graph), stores_(std::move(stores)), requires_grad_(std::move(requires_grad)) {}

  ad::Graph<T>& graph() const { return *graph_; }

  void override_value(const std::string& name, Tensor<T> value) {
    overrides_[name] = std::move(value);
  }

  ad::Var<T> operator()(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    const bool rg = requires_grad_ && requires_grad_(name);
    ad::Var<T> var;
    if (auto ov = overrides_.find(name); ov != overrides_.end()) {
      var = graph_->leaf(ov->second, rg);
    } else {
      var = graph_->leaf(lookup(name).template cast<T>(), rg);
    }
    bound_.emplace(name, var);
    return var;
  }

  bool has(const std::string& name) const {
    for (const ParameterStore* s : stores_)
      if (s->contains(name)) return true;
    return overrides_.count(name) != 0;
  }

  // Gradients for every bound differentiable parameter (after backward()).
  std::map<std::string, Tensor<T>> gradients() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, var] : bound_) {
      if (auto g = graph_->grad(var)) out.emplace(name, std::move(*g));
    }
    return out;
  }

  const std::unordered_map<std::string, ad::Var<T>>& bound() const { return bound_; }

 private:
  const Tensor<float>& lookup(const std::string& name) const {
    for (const ParameterStore* s : stores_)
      if (s->contains(name)) return s->at(name);
    fail(ErrorCategory::kInvalidArgument, "unknown parameter '" + name + "'");
  }

  ad::Graph<T>* graph_;
  std::vector<const ParameterStore*> stores_;
  Selector requires_grad_;
  std::unordered_map<std::string, Tensor<T>> overrides_;
  std::unordered_map<std::string, ad::Var<T>> bound_;
};

}  // namespace promptfuse
