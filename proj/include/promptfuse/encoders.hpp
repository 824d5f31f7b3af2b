// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

// Frozen modality feature extractors behind one interface. Every encoder
// maps a raw sample (flattened to a 1 x K row) to a sequence of width-d
// vectors whose index 0 is the summary position.

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "promptfuse/autodiff.hpp"
#include "promptfuse/image.hpp"
#include "promptfuse/params.hpp"
#include "promptfuse/tasks.hpp"

namespace promptfuse {

enum class PoolingMode { kCls, kAverage, kFullSequence };

const char* pooling_name(PoolingMode mode);
PoolingMode parse_pooling(const std::string& name);

struct PooledEmbedding {
  PoolingMode mode = PoolingMode::kCls;
  Tensor<float> vectors;  // 1 x d for Cls/Average, L x d for FullSequence
};

template <typename T>
ad::Var<T> pool_sequence(const ad::Var<T>& sequence, PoolingMode mode) {
  if (sequence.rows() == 0) fail(ErrorCategory::kInvalidArgument, "cannot pool an empty sequence");
  switch (mode) {
    case PoolingMode::kCls: return ad::slice_rows(sequence, 0, 1);
    case PoolingMode::kAverage: return ad::mean_rows(sequence);
    case PoolingMode::kFullSequence: return sequence;
  }
  return sequence;
}

PooledEmbedding pool_sequence(const Tensor<float>& sequence, PoolingMode mode);

class ModalityEncoder {
 public:
  virtual ~ModalityEncoder() = default;

  virtual const std::string& name() const = 0;
  virtual std::size_t width() const = 0;
  virtual std::size_t input_size() const = 0;
  virtual std::size_t sequence_length() const = 0;
  virtual const ParameterStore& params() const = 0;
  virtual ParameterStore& params() = 0;

  virtual ad::Var<float> forward(Binding<float>& b, const ad::Var<float>& raw) const = 0;
  virtual ad::Var<double> forward(Binding<double>& b, const ad::Var<double>& raw) const = 0;

  // Inference on one raw sample (1 x input_size) -> sequence_length x width.
  Tensor<float> encode(const Tensor<float>& raw) const;

 protected:
  void check_input(const Shape& shape) const;
};

struct VisionEncoderConfig {
  int image_size = 8;
  int patch = 2;
  int width = 64;
  int heads = 4;
  int layers = 1;
  int ffn = 128;

  int patches() const { return (image_size / patch) * (image_size / patch); }
  int patch_features() const { return patch * patch * 3; }
};

// Patch embedding + prepended learned summary token + transformer layers.
class VisionEncoder final : public ModalityEncoder {
 public:
  VisionEncoder(const VisionEncoderConfig& config, std::uint64_t seed);
  VisionEncoder(const VisionEncoderConfig& config, ParameterStore params);

  const std::string& name() const override { return name_; }
  std::size_t width() const override { return static_cast<std::size_t>(config_.width); }
  std::size_t input_size() const override {
    return static_cast<std::size_t>(config_.image_size * config_.image_size * 3);
  }
  std::size_t sequence_length() const override {
    return 1 + static_cast<std::size_t>(config_.patches());
  }
  const ParameterStore& params() const override { return params_; }
  ParameterStore& params() override { return params_; }
  const VisionEncoderConfig& config() const { return config_; }

  ad::Var<float> forward(Binding<float>& b, const ad::Var<float>& raw) const override;
  ad::Var<double> forward(Binding<double>& b, const ad::Var<double>& raw) const override;

  // Rejects images whose dimensions differ from the configured size.
  Tensor<float> encode_image(const RawImage& image) const;

 private:
  template <typename T>
  ad::Var<T> forward_impl(Binding<T>& b, const ad::Var<T>& raw) const;

  std::string name_ = "vision";
  VisionEncoderConfig config_;
  ParameterStore params_;
  std::vector<std::size_t> patch_index_;
};

struct AudioEncoderConfig {
  int window = 64;
  int kernel1 = 8;
  int stride1 = 4;
  int channels1 = 32;
  int kernel2 = 3;
  int stride2 = 2;
  int width = 64;

  int frames1() const { return (window - kernel1) / stride1 + 1; }
  int frames2() const { return (frames1() - kernel2) / stride2 + 1; }
};

// Two strided 1-D convolutions over a waveform window; the summary position
// is the mean over output frames.
class AudioEncoder final : public ModalityEncoder {
 public:
  AudioEncoder(const AudioEncoderConfig& config, std::uint64_t seed);
  AudioEncoder(const AudioEncoderConfig& config, ParameterStore params);

  const std::string& name() const override { return name_; }
  std::size_t width() const override { return static_cast<std::size_t>(config_.width); }
  std::size_t input_size() const override { return static_cast<std::size_t>(config_.window); }
  std::size_t sequence_length() const override {
    return 1 + static_cast<std::size_t>(config_.frames2());
  }
  const ParameterStore& params() const override { return params_; }
  ParameterStore& params() override { return params_; }
  const AudioEncoderConfig& config() const { return config_; }

  ad::Var<float> forward(Binding<float>& b, const ad::Var<float>& raw) const override;
  ad::Var<double> forward(Binding<double>& b, const ad::Var<double>& raw) const override;

 private:
  template <typename T>
  ad::Var<T> forward_impl(Binding<T>& b, const ad::Var<T>& raw) const;

  std::string name_ = "audio";
  AudioEncoderConfig config_;
  ParameterStore params_;
  std::vector<std::size_t> frame_index1_;
  std::vector<std::size_t> frame_index2_;
};

// Per-sample summary vectors averaged over frames/windows (1 x d).
Tensor<float> encode_temporal(std::span<const Tensor<float>> raw_samples, const ModalityEncoder& encoder);

template <typename T>
ad::Var<T> encode_temporal(Binding<T>& b, std::span<const ad::Var<T>> raw_samples,
                           const ModalityEncoder& encoder);

std::vector<Tensor<float>> frames_as_rows(const std::vector<RawImage>& frames);
std::vector<Tensor<float>> windows_as_rows(const std::vector<std::vector<float>>& windows);

// ---------------------------------------------------------------------------
// Encoder pretraining (classification heads are discarded afterwards).

struct EncoderPretrainConfig {
  int epochs = 20;
  int batch_size = 32;
  double learning_rate = 2e-3;
  std::uint64_t seed = 3;
  std::size_t scenes = 3000;
  std::size_t frames = 1000;
  std::size_t windows = 2000;
  // Weight of the summary-position alignment loss (0 disables it).
  double align_weight = 1.0;
};

// Targets for the summary position in the frozen language model's embedding
// space: summed scene-summary token embeddings for scenes, the tone word
// embedding for faces and audio windows.
struct AlignmentTargets {
  const Tensor<float>* token_table = nullptr;
  const Vocab* vocab = nullptr;

  Tensor<float> sum_of(const std::vector<std::string>& tokens) const;
};

struct EncoderPretrainMetrics {
  std::vector<double> epoch_loss;
  double heldout_accuracy = 0.0;  // mean over classification heads
  // Held-out squared error of the summary position against its alignment
  // target, relative to the mean squared target value.
  double heldout_alignment_error = 0.0;
};

// Scene attributes (pair presence, per-form counts) plus face-glyph tone,
// with the alignment loss when `align` is given.
EncoderPretrainMetrics pretrain_vision_encoder(VisionEncoder& encoder, const EncoderPretrainConfig& config,
                                               const AlignmentTargets* align = nullptr);
// Tone and cycle-count classification of waveform windows.
EncoderPretrainMetrics pretrain_audio_encoder(AudioEncoder& encoder, const EncoderPretrainConfig& config,
                                              const AlignmentTargets* align = nullptr);

// ---------------------------------------------------------------------------
// Precomputed feature files: "PFFT" magic, u32 version, u32 count, then per
// sequence u32 length, u32 width and length*width little-endian f32 values.

inline constexpr std::uint32_t kFeatureFormatVersion = 1;

void write_features(const std::filesystem::path& path, std::span<const Tensor<float>> sequences);
std::vector<Tensor<float>> load_precomputed_features(const std::filesystem::path& path,
                                                     std::size_t expected_width);

}  // namespace promptfuse
