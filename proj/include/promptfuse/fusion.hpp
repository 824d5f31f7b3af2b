// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

// Prompt-vector fusion of frozen modality encoders into a frozen language
// model, the input-blind attention mask, and the trainable-projection
// baselines it is compared against.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promptfuse/attention_mask.hpp"
#include "promptfuse/autodiff.hpp"
#include "promptfuse/params.hpp"

namespace promptfuse {

enum class FusionMethod { kPromptFuse, kBlindPrompt, kFinetune, kLinear, kJointProj, kBlackImage, kNoPrompt };
enum class PositionMode { kBegin, kMiddle, kEnd };
enum class PromptEncoderMode { kIdentity, kLinearLayer, kRecurrent };

const char* method_name(FusionMethod m);
FusionMethod parse_method(const std::string& name);
const char* position_name(PositionMode m);
PositionMode parse_position(const std::string& name);
const char* prompt_encoder_name(PromptEncoderMode m);
PromptEncoderMode parse_prompt_encoder(const std::string& name);

// Methods that prepend a prompt bank.
bool uses_prompts(FusionMethod m);

struct PromptBankConfig {
  int length = 20;
  PositionMode position = PositionMode::kBegin;
  PromptEncoderMode encoder = PromptEncoderMode::kIdentity;
};

// N trainable d-wide rows ("prompt.bank") plus the optional prompt-encoder
// parameters ("prompt.enc.*" for the linear layer, "prompt.lstm.*" for the
// recurrent encoder).
class PromptBank {
 public:
  static constexpr const char* kBankName = "prompt.bank";

  PromptBank(const PromptBankConfig& config, std::size_t width, std::uint64_t seed);

  std::size_t length() const { return static_cast<std::size_t>(config_.length); }
  std::size_t width() const { return width_; }
  const PromptBankConfig& config() const { return config_; }

  // Registers bank and encoder parameters into `store`.
  void register_parameters(ParameterStore& store) const;
  const ParameterStore& initial_parameters() const { return params_; }

 private:
  PromptBankConfig config_;
  std::size_t width_;
  ParameterStore params_;
};

// Bank rows after the configured prompt encoder (N x d). Identity returns the
// bank itself; the recurrent encoder is an LSTM with hidden width d whose
// output row i depends only on bank rows 0..i.
template <typename T>
ad::Var<T> apply_prompt_encoder(Binding<T>& b, const PromptBankConfig& config);

Tensor<float> apply_prompt_encoder(const ParameterStore& store, const PromptBankConfig& config);

// Additive self-attention mask for a sequence of `length` with the given
// prompt positions. Under BlindPrompt prompt rows are blocked at every
// non-prompt column; every other method leaves all pairs visible.
AttentionMaskSpec build_attention_mask(std::size_t length, std::span<const std::size_t> prompt_indices,
                                       FusionMethod method);
// Prompts at positions 0..n_prompts-1 followed by n_input positions.
AttentionMaskSpec build_attention_mask(std::size_t n_prompts, std::size_t n_input, FusionMethod method);

template <typename T>
struct FusedInput {
  ad::Var<T> embeddings;
  std::vector<std::size_t> prompt_indices;
  std::vector<std::size_t> modality_indices;
  std::vector<std::size_t> text_indices;
};

// Begin: [prompts | modality... | text]; Middle: [modality... | prompts | text];
// End: [modality... | text | prompts]. Empty prompts are allowed.
template <typename T>
FusedInput<T> assemble_fused_input(const std::optional<ad::Var<T>>& prompts,
                                   std::span<const ad::Var<T>> modality, const ad::Var<T>& text,
                                   PositionMode mode, std::size_t d_model, std::size_t max_len);

template <typename T>
struct BaselineInputs {
  std::vector<ad::Var<T>> modality;
  ad::Var<T> text;
};

// Linear: modality vector v_k -> v_k * A_k + b_k ("linear.<k>.w", "linear.<k>.b").
// JointProj: each text embedding w_i -> [v_1 ; ... ; w_i] * P + c ("joint.w",
// "joint.b") and the modality vectors are not passed on separately.
// Every other method passes its inputs through unchanged (BlackImage has
// already replaced the raw input upstream).
template <typename T>
BaselineInputs<T> apply_baseline_transform(Binding<T>& b, FusionMethod method,
                                           std::vector<ad::Var<T>> modality, const ad::Var<T>& text);

// Registers the projection parameters a baseline trains. Linear starts at
// A = I, b = 0; JointProj at P = [0 | I], c = 0, so both begin as the
// untrained pass-through.
void register_baseline_parameters(ParameterStore& store, FusionMethod method, std::size_t d_visual,
                                  std::size_t d_model, std::size_t n_modalities);

struct ParamCountConfig {
  std::size_t d_model = 0;
  std::size_t d_visual = 0;
  std::size_t prompt_length = 0;
  std::size_t encoder_params = 0;  // total parameters of the fine-tuned encoder(s)
  PromptEncoderMode prompt_encoder = PromptEncoderMode::kIdentity;
};

std::size_t prompt_encoder_param_count(PromptEncoderMode mode, std::size_t d_model);
std::size_t count_trainable_params(const ParamCountConfig& config, FusionMethod method);

}  // namespace promptfuse
