// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptfuse/layers.hpp"

namespace promptfuse::layers {

void add_linear(ParameterStore& store, const std::string& prefix, std::size_t in,
                std::size_t out, std::mt19937_64& rng, float stddev) {
  store.add(prefix + ".w", normal_tensor(in, out, stddev, rng));
  store.add(prefix + ".b", Tensor<float>(1, out));
}

void add_layer_norm(ParameterStore& store, const std::string& prefix, std::size_t width) {
  store.add(prefix + ".g", Tensor<float>(1, width, 1.0f));
  store.add(prefix + ".b", Tensor<float>(1, width));
}

void add_encoder_layer(ParameterStore& store, const std::string& prefix, std::size_t d,
                       std::size_t ffn, std::mt19937_64& rng) {
  add_layer_norm(store, prefix + ".ln1", d);
  add_linear(store, prefix + ".attn.qkv", d, 3 * d, rng);
  add_linear(store, prefix + ".attn.out", d, d, rng);
  add_layer_norm(store, prefix + ".ln2", d);
  add_linear(store, prefix + ".ffn.in", d, ffn, rng);
  add_linear(store, prefix + ".ffn.out", ffn, d, rng);
}

}  // namespace promptfuse::layers
