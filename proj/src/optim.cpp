// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptfuse/optim.hpp"

#include <cmath>

namespace promptfuse {

AdamState::AdamState(const std::set<std::string>& trainable, LearningRate learning_rate,
                     AdamHyper hyper)
    : trainable_(trainable), learning_rate_(std::move(learning_rate)), hyper_(hyper) {}

void AdamState::step(const std::vector<ParameterStore*>& stores,
                     const std::map<std::string, Tensor<float>>& gradients) {
  for (const auto& [name, g] : gradients) {
    if (!trainable_.count(name)) {
      fail(ErrorCategory::kInvalidArgument, "gradient for non-trainable parameter '" + name + "'");
    }
    for (float v : g.values()) {
      if (!std::isfinite(v)) {
        fail(ErrorCategory::kNumerical, "non-finite gradient for parameter '" + name + "'");
      }
    }
  }
  for (const std::string& name : trainable_) {
    if (!gradients.count(name)) {
      fail(ErrorCategory::kInvalidArgument, "missing gradient for parameter '" + name + "'");
    }
  }

  ++t_;
  const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : gradients) {
    Tensor<float>* param = nullptr;
    for (ParameterStore* s : stores) {
      if (s->contains(name)) {
        param = &s->at(name);
        break;
      }
    }
    if (!param) fail(ErrorCategory::kInvalidArgument, "unknown parameter '" + name + "'");
    if (param->shape() != g.shape()) {
      fail(ErrorCategory::kShapeMismatch, "gradient shape mismatch for '" + name + "'");
    }
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
    }
    const double lr = learning_rate_(name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i];
      m[i] = hyper_.beta1 * m[i] + (1.0 - hyper_.beta1) * gi;
      v[i] = hyper_.beta2 * v[i] + (1.0 - hyper_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      (*param)[i] = static_cast<float>((*param)[i] - lr * mhat / (std::sqrt(vhat) + hyper_.eps));
    }
  }
}

}  // namespace promptfuse
