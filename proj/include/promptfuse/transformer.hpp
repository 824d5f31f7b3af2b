// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

// Micro encoder-decoder transformer used as the frozen language model.
//
// Pre-norm layers, learned positional embeddings, GELU feed-forward blocks,
// output projection tied to the token embedding. No dropout anywhere, so two
// forward passes over the same inputs are bit-identical.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "promptfuse/attention_mask.hpp"
#include "promptfuse/autodiff.hpp"
#include "promptfuse/params.hpp"

namespace promptfuse {

// Closed word-level vocabulary. Reserved ids precede every content id.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kMask = 3;

  explicit Vocab(const std::vector<std::string>& content_tokens);

  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view token) const;
  int id(std::string_view token) const;
  const std::string& token(int id) const;

  // Whitespace-separated words to ids; unknown words are an error.
  std::vector<int> encode(std::string_view sentence) const;
  std::string decode(std::span<const int> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct ModelConfig {
  int d_model = 64;
  int heads = 4;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int ffn = 128;
  int max_len = 64;
  int max_decoder_len = 10;
  int vocab_size = 0;

  void validate() const;
  std::uint64_t fingerprint() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// A text-only question/answer pair for language-model pretraining. When
// `summary` is non-empty, the embeddings of those ids are summed into one
// vector that precedes `input`.
struct TextExample {
  std::vector<int> summary;
  std::vector<int> input;
  std::vector<int> answer;
  std::string kind;
};

// Step function for greedy decoding: logits over the vocabulary for the next
// token given the decoded prefix (which starts with begin-of-sequence).
using StepLogits = std::function<std::vector<float>(std::span<const int> prefix)>;

// Argmax decoding; exact ties go to the lowest id. Stops on end-of-sequence
// (not included in the result) or after max_steps tokens.
std::vector<int> greedy_decode(const StepLogits& step, int max_steps);

// Mean negative log-likelihood over non-pad target positions.
template <typename T>
ad::Var<T> sequence_cross_entropy(const ad::Var<T>& logits, std::span<const int> targets);

class EncoderDecoderModel {
 public:
  static constexpr const char* kPrefix = "plm";

  EncoderDecoderModel(const ModelConfig& config, std::uint64_t seed);
  EncoderDecoderModel(const ModelConfig& config, ParameterStore params);

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  static std::string token_embedding_name() { return "plm.tok_emb"; }

  template <typename T>
  ad::Var<T> embed_tokens(Binding<T>& b, std::span<const int> ids) const;
  // [sum of summary embeddings;] input embeddings.
  template <typename T>
  ad::Var<T> embed_example(Binding<T>& b, const TextExample& example) const;

  // Encoder over precomputed input embeddings. Positional embeddings for
  // indices offset..offset+L-1 are added here. `mask` may be nullptr (full
  // visibility). `trace`, when given, receives every self-attention
  // probability matrix.
  template <typename T>
  ad::Var<T> encode(Binding<T>& b, const ad::Var<T>& input_embeddings,
                    const AttentionMaskSpec* mask, std::size_t position_offset = 0,
                    std::vector<Tensor<T>>* trace = nullptr) const;

  // Teacher-forced decoder logits (steps x vocab).
  template <typename T>
  ad::Var<T> decoder_logits(Binding<T>& b, const ad::Var<T>& encoder_states,
                            std::span<const int> decoder_input) const;

  Tensor<float> encode(const Tensor<float>& input_embeddings, const AttentionMaskSpec* mask) const;
  std::vector<int> decode_greedy(const Tensor<float>& encoder_states, int max_steps) const;

  // [bos, answer...] and [answer..., eos].
  static std::vector<int> decoder_input_for(std::span<const int> answer);
  static std::vector<int> decoder_target_for(std::span<const int> answer);

 private:
  ModelConfig config_;
  ParameterStore params_;
};

struct PretrainConfig {
  int epochs = 40;
  int batch_size = 32;
  double learning_rate = 2e-3;
  std::uint64_t seed = 1;
  // Random start offsets so every positional embedding row gets trained.
  bool position_jitter = true;
};

struct PretrainMetrics {
  std::vector<double> epoch_loss;
  double heldout_exact_match = 0.0;
  std::vector<std::pair<std::string, double>> heldout_by_kind;
};

struct PretrainResult {
  EncoderDecoderModel model;
  PretrainMetrics metrics;
};

using EpochCallback = std::function<void(int epoch, double loss)>;

// Trains all language-model parameters on text-only examples. Aborts with
// kNumerical on a non-finite loss.
PretrainResult pretrain_language_model(std::span<const TextExample> train,
                                       std::span<const TextExample> heldout,
                                       const ModelConfig& config, const PretrainConfig& train_config,
                                       const EpochCallback& on_epoch = {});

// Fraction of examples whose greedy decode equals the answer exactly.
double exact_match(const EncoderDecoderModel& model, std::span<const TextExample> examples);
std::vector<int> predict(const EncoderDecoderModel& model, const TextExample& example);

}  // namespace promptfuse
