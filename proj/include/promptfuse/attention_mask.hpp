// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "promptfuse/autodiff.hpp"
#include "promptfuse/tensor.hpp"

namespace promptfuse {

// Additive L x L self-attention mask: entry (i, j) is 0 when position i may
// attend to position j and kMaskedLogit otherwise.
struct AttentionMaskSpec {
  std::size_t length = 0;
  std::vector<std::size_t> prompt_indices;
  Tensor<float> additive;

  static AttentionMaskSpec full(std::size_t length) {
    return AttentionMaskSpec{length, {}, Tensor<float>(length, length)};
  }

  bool blocked(std::size_t i, std::size_t j) const {
    return additive(i, j) < ad::kMaskedLogit<float> / 2.0f;
  }

  template <typename T>
  Tensor<T> as() const {
    Tensor<T> out(length, length);
    for (std::size_t i = 0; i < additive.size(); ++i) {
      out[i] = additive[i] < ad::kMaskedLogit<float> / 2.0f ? ad::kMaskedLogit<T> : T(0);
    }
    return out;
  }
};

}  // namespace promptfuse
