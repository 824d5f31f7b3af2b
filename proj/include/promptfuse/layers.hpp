// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

// Building blocks shared by the language model, the modality encoders and the
// prompt encoders. Parameters are addressed by name through a Binding, so the
// same code runs in either precision and with any trainable subset.

#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "promptfuse/autodiff.hpp"
#include "promptfuse/params.hpp"

namespace promptfuse::layers {

// x * W + b with W stored in (in x out) layout.
template <typename T>
ad::Var<T> linear(Binding<T>& b, const std::string& prefix, const ad::Var<T>& x) {
  return ad::add_row(ad::matmul(x, b(prefix + ".w")), b(prefix + ".b"));
}

template <typename T>
ad::Var<T> layer_norm(Binding<T>& b, const std::string& prefix, const ad::Var<T>& x) {
  return ad::layer_norm(x, b(prefix + ".g"), b(prefix + ".b"));
}

// Per-head attention probabilities, appended in layer then head order.
template <typename T>
using AttentionTrace = std::vector<Tensor<T>>;

// Scaled dot-product attention over `heads` column blocks. `mask` is an
// additive Lq x Lk matrix or nullptr for full visibility.
template <typename T>
ad::Var<T> multi_head_attention(const ad::Var<T>& q, const ad::Var<T>& k, const ad::Var<T>& v,
                                int heads, const Tensor<T>* mask,
                                AttentionTrace<T>* trace = nullptr) {
  const std::size_t width = q.cols();
  const std::size_t head_dim = width / static_cast<std::size_t>(heads);
  const T inv_sqrt = T(1) / std::sqrt(T(head_dim));
  Tensor<T> open;
  if (!mask) open = Tensor<T>(q.rows(), k.rows());
  const Tensor<T>& m = mask ? *mask : open;
  std::vector<ad::Var<T>> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * head_dim;
    auto qh = ad::slice_cols(q, off, head_dim);
    auto kh = ad::slice_cols(k, off, head_dim);
    auto vh = ad::slice_cols(v, off, head_dim);
    auto scores = ad::scale(ad::matmul_nt(qh, kh), inv_sqrt);
    auto probs = ad::masked_softmax(scores, m);
    if (trace) trace->push_back(probs.value());
    outs.push_back(ad::matmul(probs, vh));
  }
  if (heads == 1) return outs.front();
  return ad::concat_cols<T>(outs);
}

// Pre-norm self-attention block with fused QKV projection:
// x + Wo * MHA(LN(x)).
template <typename T>
ad::Var<T> self_attention_block(Binding<T>& b, const std::string& prefix, const ad::Var<T>& x,
                                int heads, const Tensor<T>* mask,
                                AttentionTrace<T>* trace = nullptr) {
  const std::size_t d = x.cols();
  auto h = layer_norm(b, prefix + ".ln1", x);
  auto qkv = linear(b, prefix + ".attn.qkv", h);
  auto q = ad::slice_cols(qkv, 0, d);
  auto k = ad::slice_cols(qkv, d, d);
  auto v = ad::slice_cols(qkv, 2 * d, d);
  auto att = multi_head_attention(q, k, v, heads, mask, trace);
  return ad::add(x, linear(b, prefix + ".attn.out", att));
}

// Pre-norm feed-forward block: x + W2 * gelu(W1 * LN(x)).
template <typename T>
ad::Var<T> feed_forward_block(Binding<T>& b, const std::string& prefix, const std::string& ln,
                              const ad::Var<T>& x) {
  auto h = layer_norm(b, prefix + "." + ln, x);
  h = ad::gelu(linear(b, prefix + ".ffn.in", h));
  return ad::add(x, linear(b, prefix + ".ffn.out", h));
}

template <typename T>
ad::Var<T> encoder_layer(Binding<T>& b, const std::string& prefix, const ad::Var<T>& x,
                         int heads, const Tensor<T>* mask, AttentionTrace<T>* trace = nullptr) {
  auto h = self_attention_block(b, prefix, x, heads, mask, trace);
  return feed_forward_block(b, prefix, "ln2", h);
}

// Parameter registration helpers (float storage).
void add_linear(ParameterStore& store, const std::string& prefix, std::size_t in,
                std::size_t out, std::mt19937_64& rng, float stddev = 0.02f);
void add_layer_norm(ParameterStore& store, const std::string& prefix, std::size_t width);
void add_encoder_layer(ParameterStore& store, const std::string& prefix, std::size_t d,
                       std::size_t ffn, std::mt19937_64& rng);

}  // namespace promptfuse::layers
