// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

// The composed system (frozen language model + modality encoders + fusion
// parameters), its parameter partition per method, few-shot sampling and the
// training loop.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "promptfuse/encoders.hpp"
#include "promptfuse/fusion.hpp"
#include "promptfuse/optim.hpp"
#include "promptfuse/tasks.hpp"
#include "promptfuse/transformer.hpp"

namespace promptfuse {

// Raw samples for one modality slot; several samples (video frames, audio
// windows) are averaged after pooling.
struct ModalityInput {
  std::string slot;
  std::vector<Tensor<float>> samples;
};

struct FusionExample {
  std::vector<ModalityInput> modalities;
  std::vector<int> text;
  std::vector<int> answer;
  std::string kind;
  std::string answer_text;
};

FusionExample to_fusion_example(const QASample& sample, const Vocab& vocab);
FusionExample to_fusion_example(const TrimodalSample& sample, const Vocab& vocab);

// Which frozen encoder serves a modality slot ("vision" and "video" use the
// vision encoder, "audio" the audio encoder).
struct ModalitySlot {
  std::string name;
  enum class Encoder { kVision, kAudio } encoder = Encoder::kVision;
  bool visual() const { return encoder == Encoder::kVision; }
};

struct FusionSpec {
  FusionMethod method = FusionMethod::kPromptFuse;
  PromptBankConfig bank;
  PoolingMode pooling = PoolingMode::kCls;
  std::vector<ModalitySlot> slots = {{"vision", ModalitySlot::Encoder::kVision}};
};

// Precomputed pooled modality embeddings per example (frozen encoders only).
using FeatureCache = std::vector<std::vector<Tensor<float>>>;

template <typename T>
struct SystemInputs {
  std::vector<ad::Var<T>> modality;  // one pooled sequence per slot
  ad::Var<T> text;
};

struct FusedLayout {
  std::vector<std::size_t> prompt_indices;
  std::vector<std::size_t> modality_indices;
  std::vector<std::size_t> text_indices;
  std::size_t length = 0;
};

class FusionSystem {
 public:
  FusionSystem(EncoderDecoderModel plm, std::optional<VisionEncoder> vision,
               std::optional<AudioEncoder> audio, const FusionSpec& spec, std::uint64_t seed);

  const FusionSpec& spec() const { return spec_; }
  const EncoderDecoderModel& plm() const { return plm_; }
  const ModalityEncoder& encoder_for(const ModalitySlot& slot) const;
  const ParameterStore& fusion_params() const { return fusion_; }
  ParameterStore& fusion_params() { return fusion_; }

  // Every parameter store of the composed system (language model, encoders,
  // fusion), in a fixed order.
  std::vector<const ParameterStore*> stores() const;
  std::vector<ParameterStore*> mutable_stores();
  std::set<std::string> parameter_names() const;

  // Raw samples actually fed to the encoder of slot k (black for visual slots
  // under BlackImage).
  std::vector<Tensor<float>> raw_samples(const FusionExample& ex, std::size_t k) const;

  // Pooled embedding of slot k from raw sample variables.
  template <typename T>
  ad::Var<T> encode_slot(Binding<T>& b, std::size_t k, std::span<const ad::Var<T>> raw) const;

  FeatureCache precompute_features(std::span<const FusionExample> examples) const;

  // Modality embeddings (from `features` when given) and text embeddings.
  template <typename T>
  SystemInputs<T> embed(Binding<T>& b, const FusionExample& ex,
                        const std::vector<Tensor<float>>* features) const;

  // Baseline transform, prompt insertion, mask and language-model encoder.
  template <typename T>
  ad::Var<T> encoder_states(Binding<T>& b, SystemInputs<T> inputs, FusedLayout* layout = nullptr,
                            std::vector<Tensor<T>>* trace = nullptr) const;

  template <typename T>
  ad::Var<T> loss(Binding<T>& b, const FusionExample& ex,
                  const std::vector<Tensor<float>>* features = nullptr) const;

  std::vector<int> predict(const FusionExample& ex, const std::vector<Tensor<float>>* features = nullptr) const;

 private:
  EncoderDecoderModel plm_;
  std::optional<VisionEncoder> vision_;
  std::optional<AudioEncoder> audio_;
  FusionSpec spec_;
  ParameterStore fusion_;
};

// ---------------------------------------------------------------------------

struct ParameterPartition {
  std::set<std::string> trainable;
  std::set<std::string> frozen;
};

ParameterPartition partition_parameters(const FusionSystem& system, FusionMethod method);

struct FewShotSample {
  std::vector<std::size_t> indices;
  AnswerHistogram histogram;
};

// Uniform without replacement, reproducible from the seed.
FewShotSample sample_few_shot(std::span<const FusionExample> dataset, std::size_t k, std::uint64_t seed);

struct EvalMetrics {
  double accuracy = 0.0;  // exact match over all examples
  std::map<std::string, double> accuracy_by_kind;
  // Scores for the positive verbalizer ("True"); set when it occurs.
  std::optional<double> precision, recall, f1;
  std::size_t count = 0;
};

EvalMetrics evaluate(const FusionSystem& system, std::span<const FusionExample> examples,
                     const FeatureCache* features, const std::string& positive_answer = "True");

struct TrainConfig {
  double prompt_learning_rate = 5e-1;
  double learning_rate = 5e-4;
  int batch_size = 32;
  int epochs = 10;
  std::uint64_t seed = 0;
  int gradient_accumulation = 1;
  std::optional<double> learning_rate_override;  // applies to every group
  std::size_t max_steps = 0;                     // 0: no step limit
  bool evaluate_each_epoch = true;
  std::optional<std::filesystem::path> last_good_checkpoint;
};

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  EvalMetrics eval;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  std::vector<double> step_losses;
  std::size_t steps = 0;
  std::uint64_t frozen_hash_before = 0;
  std::uint64_t frozen_hash_after = 0;
};

// Trains the partition's trainable parameters in place. Per-epoch metrics use
// `eval` when given, else the training set. A non-finite loss aborts with
// kNumerical after writing the last good parameters to
// `config.last_good_checkpoint` when set.
TrainResult train(FusionSystem& system, std::span<const FusionExample> dataset,
                  const ParameterPartition& partition, const TrainConfig& config,
                  std::span<const FusionExample> eval = {});

}  // namespace promptfuse
