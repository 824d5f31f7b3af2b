// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

// Deterministic synthetic tasks with exact ground truth:
//   * a two-modality VQA-style task over rendered shape scenes
//     (Number / YesNo / Other question types);
//   * a three-modality incongruence task (video frames, audio windows,
//     utterance) answered with a True/False verbalizer.
// Every generator is a pure function of its seed.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "promptfuse/image.hpp"
#include "promptfuse/transformer.hpp"

namespace promptfuse {

enum class Form { kSquare, kCircle, kTriangle };
enum class Color { kRed, kGreen, kBlue, kYellow };

inline constexpr std::array<Form, 3> kForms = {Form::kSquare, Form::kCircle, Form::kTriangle};
inline constexpr std::array<Color, 4> kColors = {Color::kRed, Color::kGreen, Color::kBlue,
                                                 Color::kYellow};

const char* form_word(Form f);
const char* color_word(Color c);
std::array<float, 3> color_rgb(Color c);

// Pixels (within a 2x2 cell) covered by each form: square 4, triangle 3,
// circle 2 (diagonal).
std::vector<std::pair<int, int>> form_cells(Form f);

struct SceneObject {
  Form form;
  Color color;
  int row;
  int col;
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct SceneSpec {
  int grid = 4;
  int min_objects = 1;
  int max_objects = 4;
};

// Objects never occupy king-adjacent cells, so each renders as its own
// 8-connected region.
struct Scene {
  std::vector<SceneObject> objects;
  RawImage image;
  int grid = 4;
  std::uint64_t seed = 0;
};

// Largest object count that fits a grid without king adjacency.
int max_objects_for_grid(int grid);

RawImage render_scene(const std::vector<SceneObject>& objects, int grid);
Scene generate_scene(std::uint64_t seed, const SceneSpec& spec);

enum class QuestionType { kNumber, kYesNo, kOther };
const char* question_type_name(QuestionType t);

struct QASample {
  Scene scene;
  std::vector<std::string> question;
  std::vector<std::string> answer;
  QuestionType type = QuestionType::kNumber;
  std::uint64_t seed = 0;
};

QASample generate_qa(const Scene& scene, std::uint64_t seed);

// Scene described as words in row-major cell order: "<color> <form> ...".
std::vector<std::string> describe_scene(const Scene& scene);

struct TrimodalSpec {
  int min_frames = 2;
  int max_frames = 4;
  int min_windows = 2;
  int max_windows = 4;
  std::size_t window_length = 64;
  float audio_noise = 0.1f;
  float frame_noise = 0.05f;
};

struct TrimodalSample {
  std::vector<RawImage> frames;
  std::vector<std::vector<float>> audio_windows;
  std::vector<std::string> utterance;
  bool text_positive = false;
  bool tone_positive = false;
  bool label = false;
  std::string verbalized;
  std::uint64_t seed = 0;
};

TrimodalSample generate_trimodal(std::uint64_t seed, const TrimodalSpec& spec = {});

// Frequency band (cycles per window) used for each tone.
inline constexpr std::array<int, 3> kPositiveToneCycles = {10, 11, 12};
inline constexpr std::array<int, 3> kNegativeToneCycles = {3, 4, 5};

const std::vector<std::vector<std::string>>& positive_utterances();
const std::vector<std::vector<std::string>>& negative_utterances();
const char* tone_word(bool positive);

// The closed vocabulary covering every template of both tasks plus the
// scene-summary tokens.
const Vocab& lab_vocabulary();

// "<scene>" followed by one "<color>-<form>" token per object.
std::vector<std::string> scene_summary_tokens(const Scene& scene);

// Object words ordered by (color, form) instead of by cell, so the caption
// is recoverable from an order-free scene summary.
std::vector<std::string> scene_caption(const Scene& scene);

// How a scene is rendered as text for language-model pretraining: as the
// word sequence of describe_scene, or as the summed embeddings of its
// summary tokens (one input position).
enum class SceneRendering { kWords, kSummary };

// Language-model pretraining is multi-task over identical inputs: the
// instruction words ahead of the question select answering or captioning.
// Fusion inputs carry no instruction.
enum class PretrainTask { kAnswer, kCaption };
std::vector<std::string> instruction_words(PretrainTask task);

// Text-only renderings used to pretrain the language model: the scene (or
// the tone words) comes first, then the instruction, then the question.
TextExample text_only_example(const QASample& sample, const Vocab& vocab,
                              SceneRendering rendering = SceneRendering::kSummary,
                              PretrainTask task = PretrainTask::kAnswer);
TextExample text_only_example(const TrimodalSample& sample, const Vocab& vocab,
                              PretrainTask task = PretrainTask::kAnswer);

// Per-question-type answer histogram.
struct AnswerHistogram {
  std::map<std::string, std::map<std::string, std::size_t>> by_type;
  std::size_t total = 0;

  void add(const std::string& type, const std::string& answer);
  // Share of samples a constant predictor of the overall majority answer gets right.
  double majority_share() const;
  std::string majority_answer() const;
};

AnswerHistogram histogram(const std::vector<QASample>& samples);
AnswerHistogram histogram(const std::vector<TrimodalSample>& samples);

struct SplitSizes {
  std::size_t train = 512;
  std::size_t eval = 256;
};

template <typename Sample>
struct Splits {
  std::vector<Sample> train;
  std::vector<Sample> eval;
  AnswerHistogram train_histogram;
  AnswerHistogram eval_histogram;
};

// Sample seeds are derived from (seed, split, index); train and eval seed sets
// are disjoint by construction and checked.
Splits<QASample> build_qa_splits(const SplitSizes& sizes, std::uint64_t seed,
                                 const SceneSpec& spec = {});
Splits<TrimodalSample> build_trimodal_splits(const SplitSizes& sizes, std::uint64_t seed,
                                             const TrimodalSpec& spec = {});

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index);

}  // namespace promptfuse
