// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptfuse/fusion.hpp"

#include <random>

#include "promptfuse/layers.hpp"

namespace promptfuse {

namespace {

template <typename E, std::size_t N>
E parse_enum(const std::string& name, const std::array<E, N>& values, const char* (*to_name)(E),
             const char* what) {
  for (E v : values)
    if (name == to_name(v)) return v;
  fail(ErrorCategory::kConfig, std::string("unknown ") + what + " '" + name + "'");
}

}  // namespace

const char* method_name(FusionMethod m) {
  switch (m) {
    case FusionMethod::kPromptFuse: return "PromptFuse";
    case FusionMethod::kBlindPrompt: return "BlindPrompt";
    case FusionMethod::kFinetune: return "Finetune";
    case FusionMethod::kLinear: return "Linear";
    case FusionMethod::kJointProj: return "JointProj";
    case FusionMethod::kBlackImage: return "BlackImage";
    case FusionMethod::kNoPrompt: return "NoPrompt";
  }
  return "?";
}

FusionMethod parse_method(const std::string& name) {
  static constexpr std::array kAll = {FusionMethod::kPromptFuse, FusionMethod::kBlindPrompt,
                                      FusionMethod::kFinetune,   FusionMethod::kLinear,
                                      FusionMethod::kJointProj,  FusionMethod::kBlackImage,
                                      FusionMethod::kNoPrompt};
  return parse_enum(name, kAll, method_name, "fusion method");
}

const char* position_name(PositionMode m) {
  switch (m) {
    case PositionMode::kBegin: return "Begin";
    case PositionMode::kMiddle: return "Middle";
    case PositionMode::kEnd: return "End";
  }
  return "?";
}

PositionMode parse_position(const std::string& name) {
  static constexpr std::array kAll = {PositionMode::kBegin, PositionMode::kMiddle, PositionMode::kEnd};
  return parse_enum(name, kAll, position_name, "prompt position");
}

const char* prompt_encoder_name(PromptEncoderMode m) {
  switch (m) {
    case PromptEncoderMode::kIdentity: return "Identity";
    case PromptEncoderMode::kLinearLayer: return "LinearLayer";
    case PromptEncoderMode::kRecurrent: return "Recurrent";
  }
  return "?";
}

PromptEncoderMode parse_prompt_encoder(const std::string& name) {
  static constexpr std::array kAll = {PromptEncoderMode::kIdentity, PromptEncoderMode::kLinearLayer,
                                      PromptEncoderMode::kRecurrent};
  return parse_enum(name, kAll, prompt_encoder_name, "prompt encoder");
}

bool uses_prompts(FusionMethod m) {
  return m == FusionMethod::kPromptFuse || m == FusionMethod::kBlindPrompt ||
         m == FusionMethod::kBlackImage;
}

// ---------------------------------------------------------------------------
// Prompt bank

PromptBank::PromptBank(const PromptBankConfig& config, std::size_t width, std::uint64_t seed)
    : config_(config), width_(width) {
  if (config.length < 0) fail(ErrorCategory::kConfig, "prompt length must be >= 0");
  if (width == 0) fail(ErrorCategory::kConfig, "prompt width must be positive");
  std::mt19937_64 rng(seed);
  params_.add(kBankName, normal_tensor(length(), width, 0.02f, rng));
  switch (config.encoder) {
    case PromptEncoderMode::kIdentity: break;
    case PromptEncoderMode::kLinearLayer: layers::add_linear(params_, "prompt.enc", width, width, rng); break;
    case PromptEncoderMode::kRecurrent:
      params_.add("prompt.lstm.wx", normal_tensor(width, 4 * width, 0.1f, rng));
      params_.add("prompt.lstm.wh", normal_tensor(width, 4 * width, 0.1f, rng));
      params_.add("prompt.lstm.b", Tensor<float>(1, 4 * width));
      break;
  }
}

void PromptBank::register_parameters(ParameterStore& store) const {
  for (const auto& [name, t] : params_) store.add(name, t);
}

template <typename T>
ad::Var<T> apply_prompt_encoder(Binding<T>& b, const PromptBankConfig& config) {
  auto bank = b(PromptBank::kBankName);
  switch (config.encoder) {
    case PromptEncoderMode::kIdentity: return bank;
    case PromptEncoderMode::kLinearLayer: return layers::linear(b, "prompt.enc", bank);
    case PromptEncoderMode::kRecurrent: {
      if (bank.rows() == 0) return bank;
      const std::size_t d = bank.cols();
      auto xw = ad::add_row(ad::matmul(bank, b("prompt.lstm.wx")), b("prompt.lstm.b"));
      auto wh = b("prompt.lstm.wh");
      std::optional<ad::Var<T>> h, c;
      std::vector<ad::Var<T>> outs;
      for (std::size_t i = 0; i < bank.rows(); ++i) {
        auto gates = ad::slice_rows(xw, i, 1);
        if (h) gates = ad::add(gates, ad::matmul(*h, wh));
        auto in = ad::sigmoid(ad::slice_cols(gates, 0, d));
        auto forget = ad::sigmoid(ad::slice_cols(gates, d, d));
        auto cand = ad::tanh(ad::slice_cols(gates, 2 * d, d));
        auto out = ad::sigmoid(ad::slice_cols(gates, 3 * d, d));
        auto cell = ad::mul(in, cand);
        if (c) cell = ad::add(cell, ad::mul(forget, *c));
        c = cell;
        h = ad::mul(out, ad::tanh(cell));
        outs.push_back(*h);
      }
      return ad::concat_rows<T>(outs);
    }
  }
  return bank;
}

template ad::Var<float> apply_prompt_encoder(Binding<float>&, const PromptBankConfig&);
template ad::Var<double> apply_prompt_encoder(Binding<double>&, const PromptBankConfig&);

Tensor<float> apply_prompt_encoder(const ParameterStore& store, const PromptBankConfig& config) {
  ad::Graph<float> g;
  Binding<float> b(g, {&store});
  return apply_prompt_encoder(b, config).value();
}

// ---------------------------------------------------------------------------
// Masks and layout

AttentionMaskSpec build_attention_mask(std::size_t length, std::span<const std::size_t> prompt_indices,
                                       FusionMethod method) {
  AttentionMaskSpec spec = AttentionMaskSpec::full(length);
  std::vector<bool> is_prompt(length, false);
  for (std::size_t i : prompt_indices) {
    if (i >= length) fail(ErrorCategory::kInvalidArgument, "prompt index outside the sequence");
    if (is_prompt[i]) fail(ErrorCategory::kInvalidArgument, "duplicate prompt index");
    is_prompt[i] = true;
  }
  spec.prompt_indices.assign(prompt_indices.begin(), prompt_indices.end());
  if (method != FusionMethod::kBlindPrompt) return spec;
  if (prompt_indices.empty()) {
    fail(ErrorCategory::kInvalidArgument, "BlindPrompt mask needs at least one prompt position");
  }
  for (std::size_t i = 0; i < length; ++i) {
    if (!is_prompt[i]) continue;
    for (std::size_t j = 0; j < length; ++j) {
      if (!is_prompt[j]) spec.additive(i, j) = ad::kMaskedLogit<float>;
    }
  }
  return spec;
}

AttentionMaskSpec build_attention_mask(std::size_t n_prompts, std::size_t n_input, FusionMethod method) {
  std::vector<std::size_t> prompts(n_prompts);
  for (std::size_t i = 0; i < n_prompts; ++i) prompts[i] = i;
  return build_attention_mask(n_prompts + n_input, prompts, method);
}

template <typename T>
FusedInput<T> assemble_fused_input(const std::optional<ad::Var<T>>& prompts,
                                   std::span<const ad::Var<T>> modality, const ad::Var<T>& text,
                                   PositionMode mode, std::size_t d_model, std::size_t max_len) {
  auto check_width = [&](const ad::Var<T>& v, const char* what) {
    if (v.cols() != d_model) {
      fail(ErrorCategory::kShapeMismatch, std::string(what) + " width " + std::to_string(v.cols()) +
                                              " does not match model width " + std::to_string(d_model));
    }
  };
  const bool have_prompts = prompts && prompts->rows() > 0;
  if (have_prompts) check_width(*prompts, "prompt");
  for (const auto& m : modality) check_width(m, "modality embedding");
  check_width(text, "text embedding");

  std::vector<ad::Var<T>> parts;
  FusedInput<T> out;
  std::size_t cursor = 0;
  auto place = [&](const ad::Var<T>& v, std::vector<std::size_t>& indices) {
    for (std::size_t i = 0; i < v.rows(); ++i) indices.push_back(cursor++);
    if (v.rows() > 0) parts.push_back(v);
  };
  auto place_prompts = [&] {
    if (have_prompts) place(*prompts, out.prompt_indices);
  };
  if (mode == PositionMode::kBegin) place_prompts();
  for (const auto& m : modality) place(m, out.modality_indices);
  if (mode == PositionMode::kMiddle) place_prompts();
  place(text, out.text_indices);
  if (mode == PositionMode::kEnd) place_prompts();

  if (cursor > max_len) {
    fail(ErrorCategory::kInvalidArgument, "fused input length " + std::to_string(cursor) +
                                              " exceeds max length " + std::to_string(max_len));
  }
  if (parts.empty()) fail(ErrorCategory::kInvalidArgument, "fused input is empty");
  out.embeddings = parts.size() == 1 ? parts.front() : ad::concat_rows<T>(parts);
  return out;
}

template FusedInput<float> assemble_fused_input(const std::optional<ad::Var<float>>&,
                                                std::span<const ad::Var<float>>, const ad::Var<float>&,
                                                PositionMode, std::size_t, std::size_t);
template FusedInput<double> assemble_fused_input(const std::optional<ad::Var<double>>&,
                                                 std::span<const ad::Var<double>>,
                                                 const ad::Var<double>&, PositionMode, std::size_t,
                                                 std::size_t);

// ---------------------------------------------------------------------------
// Baselines

template <typename T>
BaselineInputs<T> apply_baseline_transform(Binding<T>& b, FusionMethod method,
                                           std::vector<ad::Var<T>> modality, const ad::Var<T>& text) {
  switch (method) {
    case FusionMethod::kLinear: {
      BaselineInputs<T> out{{}, text};
      for (std::size_t k = 0; k < modality.size(); ++k) {
        out.modality.push_back(layers::linear(b, "linear." + std::to_string(k), modality[k]));
      }
      return out;
    }
    case FusionMethod::kJointProj: {
      std::vector<ad::Var<T>> cols;
      for (const auto& v : modality) {
        if (v.rows() != 1) {
          fail(ErrorCategory::kShapeMismatch, "JointProj needs one pooled vector per modality");
        }
        cols.push_back(ad::repeat_rows(v, text.rows()));
      }
      cols.push_back(text);
      return BaselineInputs<T>{{}, layers::linear(b, "joint", ad::concat_cols<T>(cols))};
    }
    case FusionMethod::kPromptFuse:
    case FusionMethod::kBlindPrompt:
    case FusionMethod::kFinetune:
    case FusionMethod::kBlackImage:
    case FusionMethod::kNoPrompt:
      return BaselineInputs<T>{std::move(modality), text};
  }
  fail(ErrorCategory::kConfig, "unknown fusion method");
}

template BaselineInputs<float> apply_baseline_transform(Binding<float>&, FusionMethod,
                                                        std::vector<ad::Var<float>>, const ad::Var<float>&);
template BaselineInputs<double> apply_baseline_transform(Binding<double>&, FusionMethod,
                                                         std::vector<ad::Var<double>>,
                                                         const ad::Var<double>&);

void register_baseline_parameters(ParameterStore& store, FusionMethod method, std::size_t d_visual,
                                  std::size_t d_model, std::size_t n_modalities) {
  if (method == FusionMethod::kLinear) {
    for (std::size_t k = 0; k < n_modalities; ++k) {
      Tensor<float> a(d_visual, d_visual);
      for (std::size_t i = 0; i < d_visual; ++i) a(i, i) = 1.0f;
      const std::string p = "linear." + std::to_string(k);
      store.add(p + ".w", std::move(a));
      store.add(p + ".b", Tensor<float>(1, d_visual));
    }
  } else if (method == FusionMethod::kJointProj) {
    const std::size_t in = n_modalities * d_visual + d_model;
    Tensor<float> p(in, d_model);
    for (std::size_t i = 0; i < d_model; ++i) p(n_modalities * d_visual + i, i) = 1.0f;
    store.add("joint.w", std::move(p));
    store.add("joint.b", Tensor<float>(1, d_model));
  }
}

// ---------------------------------------------------------------------------
// Parameter accounting

std::size_t prompt_encoder_param_count(PromptEncoderMode mode, std::size_t d) {
  switch (mode) {
    case PromptEncoderMode::kIdentity: return 0;
    case PromptEncoderMode::kLinearLayer: return d * d + d;
    case PromptEncoderMode::kRecurrent: return 2 * d * 4 * d + 4 * d;
  }
  return 0;
}

std::size_t count_trainable_params(const ParamCountConfig& c, FusionMethod method) {
  switch (method) {
    case FusionMethod::kPromptFuse:
    case FusionMethod::kBlindPrompt:
    case FusionMethod::kBlackImage:
      return c.prompt_length * c.d_model + prompt_encoder_param_count(c.prompt_encoder, c.d_model);
    case FusionMethod::kLinear: return c.d_visual * c.d_visual + c.d_visual;
    case FusionMethod::kJointProj: return (c.d_visual + c.d_model) * c.d_model + c.d_model;
    case FusionMethod::kFinetune: return c.encoder_params;
    case FusionMethod::kNoPrompt: return 0;
  }
  return 0;
}

}  // namespace promptfuse
