// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "promptfuse/error.hpp"
#include "promptfuse/tensor.hpp"

namespace promptfuse {

// H x W x 3 grid of reals in [0, 1], stored row-major with channels last.
struct RawImage {
  std::size_t height = 8;
  std::size_t width = 8;
  std::vector<float> pixels;

  static RawImage black(std::size_t height = 8, std::size_t width = 8) {
    return RawImage{height, width, std::vector<float>(height * width * 3, 0.0f)};
  }

  float& at(std::size_t r, std::size_t c, std::size_t ch) { return pixels[(r * width + c) * 3 + ch]; }
  float at(std::size_t r, std::size_t c, std::size_t ch) const {
    return pixels[(r * width + c) * 3 + ch];
  }

  bool is_black() const {
    for (float p : pixels)
      if (p != 0.0f) return false;
    return true;
  }

  // Flattened 1 x (H*W*3) row.
  template <typename T>
  Tensor<T> as_row() const {
    return Tensor<T>(1, pixels.size(), std::vector<T>(pixels.begin(), pixels.end()));
  }

  friend bool operator==(const RawImage&, const RawImage&) = default;
};

}  // namespace promptfuse
