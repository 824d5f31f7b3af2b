// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "promptfuse/params.hpp"

namespace promptfuse {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam. Moment accumulators exist only for the trainable names
// given at construction; each name carries its own learning rate (parameter
// groups).
class AdamState {
 public:
  using LearningRate = std::function<double(const std::string&)>;

  AdamState(const std::set<std::string>& trainable, LearningRate learning_rate,
            AdamHyper hyper = {});

  // `gradients` must cover exactly the trainable set. Throws kNumerical with
  // the parameter name on a non-finite gradient, before any write.
  void step(const std::vector<ParameterStore*>& stores,
            const std::map<std::string, Tensor<float>>& gradients);

  std::int64_t steps() const { return t_; }
  const std::set<std::string>& trainable() const { return trainable_; }
  double learning_rate(const std::string& name) const { return learning_rate_(name); }
  const std::vector<double>& first_moment(const std::string& name) const { return m_.at(name); }
  const std::vector<double>& second_moment(const std::string& name) const { return v_.at(name); }

 private:
  std::set<std::string> trainable_;
  LearningRate learning_rate_;
  AdamHyper hyper_;
  std::int64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

}  // namespace promptfuse
