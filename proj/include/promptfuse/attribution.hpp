// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

// Integrated Gradients with a right-endpoint Riemann sum, and its application
// to a fused model (raw pixels plus question token embeddings).

#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "promptfuse/trainer.hpp"

namespace promptfuse {

struct ValueAndGradient {
  double value = 0.0;
  std::vector<double> gradient;
};

using DifferentiableScalar = std::function<ValueAndGradient(std::span<const double> x)>;

struct IGResult {
  std::vector<double> attributions;
  double f_input = 0.0;
  double f_baseline = 0.0;
  double delta = 0.0;  // |sum(attributions) - (f_input - f_baseline)|
  int steps = 0;
};

// attr_i = (x_i - x'_i) * (1/m) * sum_{k=1..m} dF/dx_i(x' + (k/m)(x - x')).
// Throws kNumerical naming k when a gradient is not finite.
IGResult integrated_gradients(const DifferentiableScalar& f, std::span<const double> input,
                              std::span<const double> baseline, int steps);

struct CompletenessReport {
  bool pass = false;
  double delta = 0.0;
  double allowed = 0.0;
};

// Pass iff delta <= tolerance * max(1, |F(input) - F(baseline)|).
CompletenessReport completeness_check(const IGResult& result, double tolerance);

struct IGConfig {
  int steps = 128;
};

struct ModelAttribution {
  IGResult ig;
  int target_token = 0;
  std::vector<int> prediction;
  // Per visual raw sample: height x width map summed over color channels.
  std::vector<Tensor<double>> pixel_scores;
  std::vector<int> tokens;
  std::vector<double> token_scores;  // summed over the embedding dimension
  double image_share = 0.0;          // |pixel| mass over |pixel| + |token| mass
};

// Target: log-probability of the greedy first answer token after
// begin-of-sequence. Inputs: raw samples of every visual slot and the text
// token embeddings. Baseline: black images and zero embeddings. Non-visual
// slots are held at their actual input.
ModelAttribution attribute(const FusionSystem& system, const FusionExample& example, const IGConfig& config,
                           std::size_t image_height = 8, std::size_t image_width = 8);

// Doubles m from `start` until the relative completeness check passes at
// `tolerance` or `max_steps` is exceeded; returns the last run.
ModelAttribution attribute_calibrated(const FusionSystem& system, const FusionExample& example,
                                      double tolerance, int start, int max_steps);

// Writes <stem>.json (tokens with signed scores, prediction, completeness
// delta) and <stem>_<k>.pgm (binary 8-bit graymap of |pixel scores|
// normalized to [0, 255]) for every visual sample.
std::vector<std::filesystem::path> export_attribution(const ModelAttribution& result, const Vocab& vocab,
                                                      const std::filesystem::path& directory,
                                                      const std::string& stem);

// 8-bit binary graymap of |scores| scaled so the largest magnitude maps to
// 255 (all zeros when every score is zero).
std::string graymap(const Tensor<double>& scores);

}  // namespace promptfuse
