// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

// Configuration-driven experiment runner: pretraining, few-shot fusion runs
// over methods x shots x seeds, the prompt-length sweep, metrics records and
// summary tables.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptfuse/attribution.hpp"
#include "promptfuse/checkpoint.hpp"
#include "promptfuse/encoders.hpp"
#include "promptfuse/tasks.hpp"
#include "promptfuse/trainer.hpp"
#include "promptfuse/transformer.hpp"

namespace promptfuse {

enum class TaskKind { kVqa2Mod, kTrimodal };
const char* task_name(TaskKind t);
TaskKind parse_task(const std::string& name);

struct DataConfig {
  std::size_t train_pool = 2048;  // examples the few-shot subsets are drawn from
  std::size_t eval = 256;
  std::uint64_t seed = 7;
};

struct LanguagePretrainConfig {
  std::size_t qa_examples = 15000;
  std::size_t trimodal_examples = 2000;
  std::size_t heldout_qa = 400;
  std::size_t heldout_trimodal = 100;
  // Share of scene examples whose description is given as one summed
  // scene-summary vector instead of word tokens.
  double summary_fraction = 1.0;
  // Share of examples trained on the caption instruction.
  double caption_fraction = 0.5;
  std::uint64_t data_seed = 11;
  PretrainConfig train{.epochs = 20, .batch_size = 32, .learning_rate = 1e-3, .seed = 1, .position_jitter = true};
};

struct IGSettings {
  int steps = 128;
  double tolerance = 0.005;
  int max_steps = 2048;
};

struct ExperimentConfig {
  TaskKind task = TaskKind::kVqa2Mod;
  std::vector<FusionMethod> methods = {FusionMethod::kPromptFuse};
  std::optional<std::size_t> shots = 512;  // nullopt: full training pool
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  DataConfig data;
  ModelConfig model;
  VisionEncoderConfig vision;
  AudioEncoderConfig audio;
  LanguagePretrainConfig plm_pretrain;
  EncoderPretrainConfig encoder_pretrain;
  TrainConfig train;
  PromptBankConfig prompt;
  std::optional<PoolingMode> pooling;  // default: cls for images, average for trimodal
  IGSettings ig;
  std::vector<int> sweep_prompt_lengths = {5, 10, 20, 40, 60, 80, 100};
  std::filesystem::path artifacts = "artifacts";  // pretrained checkpoints

  PoolingMode effective_pooling() const;
  std::string shots_label() const;  // integer or "full"
};

// Batch size, epochs and seed count of the given task and data regime.
TrainConfig default_train_config(TaskKind task, bool full_data);
std::vector<std::uint64_t> default_seeds(TaskKind task);

// Parses a JSON document; unknown keys anywhere are rejected with kConfig.
// Unset training keys take the defaults of the task and data regime.
ExperimentConfig parse_experiment_config(const nlohmann::json& doc);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& config);

// Fingerprints binding checkpoints to the configuration that produced them.
std::uint64_t plm_fingerprint(const ExperimentConfig& config);
std::uint64_t vision_fingerprint(const ExperimentConfig& config);
std::uint64_t audio_fingerprint(const ExperimentConfig& config);
std::uint64_t fusion_fingerprint(const ExperimentConfig& config, FusionMethod method);

// ---------------------------------------------------------------------------
// Pretraining stages

struct LanguageCorpus {
  std::vector<TextExample> train;
  std::vector<TextExample> heldout;  // answer instruction, summary rendering
};

LanguageCorpus build_language_corpus(const LanguagePretrainConfig& config, const Vocab& vocab);

// ModelConfig of the experiment with the vocabulary size filled in.
ModelConfig resolved_model_config(const ExperimentConfig& config);

struct PretrainedComponents {
  EncoderDecoderModel plm;
  std::optional<VisionEncoder> vision;
  std::optional<AudioEncoder> audio;
};

PretrainResult run_language_pretraining(const ExperimentConfig& config, const EpochCallback& on_epoch = {});
struct EncoderPretrainReport {
  EncoderPretrainMetrics vision;
  EncoderPretrainMetrics audio;
};
EncoderPretrainReport run_encoder_pretraining(const ExperimentConfig& config, const EncoderDecoderModel& plm,
                                              VisionEncoder& vision, AudioEncoder& audio);

// Checkpoint paths under config.artifacts.
std::filesystem::path plm_checkpoint_path(const ExperimentConfig& config);
std::filesystem::path vision_checkpoint_path(const ExperimentConfig& config);
std::filesystem::path audio_checkpoint_path(const ExperimentConfig& config);

// Throws kMissingCheckpoint or kFingerprintMismatch. The audio encoder is
// loaded only for the trimodal task.
PretrainedComponents load_pretrained(const ExperimentConfig& config);

// Loads the pretrained components, first running and saving any stage whose
// checkpoint is missing. `log` receives one line per stage.
PretrainedComponents ensure_pretrained(const ExperimentConfig& config, std::ostream* log = nullptr);

// ---------------------------------------------------------------------------
// Fusion runs and metrics

struct MetricsRecord {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string method;
  std::string shots;  // integer or "full"
  int prompt_length = 0;
  int epoch = 0;
  double loss = 0.0;
  // Percentages: Other, YesNo, Number, Overall or Precision, Recall, F-Score.
  std::vector<std::pair<std::string, double>> scores;

  // Ordered so the score columns keep their table order.
  nlohmann::ordered_json to_json() const;
  static MetricsRecord from_json(const nlohmann::ordered_json& j);
};

struct RunOutcome {
  std::vector<MetricsRecord> records;  // one per epoch
  EvalMetrics final_eval;
  double wall_clock_seconds = 0.0;
  ParameterStore fusion_params;
};

struct TaskData {
  std::vector<FusionExample> train_pool;
  std::vector<FusionExample> eval;
  AnswerHistogram eval_histogram;
};

TaskData build_task_data(const ExperimentConfig& config);

FusionSpec fusion_spec_for(const ExperimentConfig& config, FusionMethod method);

// One (method, shots, seed) run: sample shots, partition, train, evaluate.
// Throws kInfeasible when the shot count exceeds the training pool.
RunOutcome run_single(const ExperimentConfig& config, const PretrainedComponents& components,
                      const TaskData& data, FusionMethod method, std::uint64_t seed);

// A fusion system with the parameters of a saved run checkpoint.
FusionSystem restore_run(const ExperimentConfig& config, const PretrainedComponents& components,
                         FusionMethod method, std::uint64_t seed, const std::filesystem::path& checkpoint);

std::vector<std::pair<std::string, double>> score_columns(TaskKind task, const EvalMetrics& eval);

std::string run_id(const ExperimentConfig& config, FusionMethod method, std::uint64_t seed);

// "29.4±0.4": mean and sample standard deviation, one decimal.
std::string format_mean_std(const std::vector<double>& values);

// Summary over the final-epoch record of every run, grouped by
// (method, shots, prompt length), in first-seen order.
std::string summary_table(const std::vector<MetricsRecord>& records);

// Methods as rows, prompt lengths as columns, mean of `score` per cell over
// the final-epoch records.
std::string sweep_grid(const std::vector<MetricsRecord>& records, const std::string& score);

// Writes records as newline-delimited JSON to `jsonl` and the summary table
// to `summary`. Throws kIo when a path is unwritable and kInvalidArgument on
// an empty record list.
void emit_metrics(const std::vector<MetricsRecord>& records, const std::filesystem::path& jsonl,
                  const std::filesystem::path& summary);
std::vector<MetricsRecord> read_metrics(const std::filesystem::path& jsonl);

struct ExperimentOutput {
  std::vector<MetricsRecord> records;
  std::vector<std::pair<std::string, double>> wall_clock;  // run id -> seconds
};

// Every (method x seed) run of the config; writes metrics.jsonl, summary.txt,
// timing.json and one fusion checkpoint per run under `out`.
ExperimentOutput run_experiment(const ExperimentConfig& config, const std::filesystem::path& out);
ExperimentOutput run_experiment(const ExperimentConfig& config, const PretrainedComponents& components,
                                const std::filesystem::path& out);

// The configured methods x seeds for every prompt length of the sweep.
// Also writes grid.txt (sweep_grid of Overall or F-Score).
ExperimentOutput run_prompt_length_sweep(const ExperimentConfig& config, const std::filesystem::path& out);
ExperimentOutput run_prompt_length_sweep(const ExperimentConfig& config, const PretrainedComponents& components,
                                         const std::filesystem::path& out);

}  // namespace promptfuse
