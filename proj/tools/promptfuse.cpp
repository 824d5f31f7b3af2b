// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: pretraining stages, fusion runs, sweeps,
// attribution, parameter accounting and data generation.

#include <chrono>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "promptfuse/attribution.hpp"
#include "promptfuse/binary_io.hpp"
#include "promptfuse/experiments.hpp"

namespace fs = std::filesystem;
using namespace promptfuse;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> shots;
  std::optional<std::string> method;
  std::optional<int> prompt_length;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "experiment config (JSON)");
  cmd->add_option("--seed", o.seed, "run only this seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--shots", o.shots, "shot count or 'full'");
  cmd->add_option("--method", o.method, "run only this fusion method");
  cmd->add_option("--prompt-length", o.prompt_length, "prompt length N");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c = o.config.empty() ? parse_experiment_config(nlohmann::json::object())
                                        : load_experiment_config(o.config);
  if (o.shots) {
    if (*o.shots == "full") {
      c.shots.reset();
    } else {
      try {
        std::size_t used = 0;
        const long long v = std::stoll(*o.shots, &used);
        if (used != o.shots->size() || v < 0) throw std::invalid_argument("negative");
        c.shots = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        fail(ErrorCategory::kInvalidArgument, "--shots takes a non-negative integer or 'full'");
      }
    }
  }
  if (o.seed) c.seeds = {*o.seed};
  if (o.method) c.methods = {parse_method(*o.method)};
  if (o.prompt_length) {
    if (*o.prompt_length < 0) fail(ErrorCategory::kInvalidArgument, "--prompt-length must be non-negative");
    c.prompt.length = *o.prompt_length;
  }
  return c;
}

fs::path out_dir(const Overrides& o, const char* fallback) { return o.out ? fs::path(*o.out) : fs::path(fallback); }

void save_store(const fs::path& path, const ParameterStore& store, std::uint64_t fingerprint) {
  save_checkpoint(path, collect_checkpoint({&store}, store.names(), fingerprint));
}

int cmd_pretrain_plm(const Overrides& o) {
  ExperimentConfig c = resolve(o);
  if (o.out) c.artifacts = *o.out;
  fs::create_directories(c.artifacts);
  const auto result = run_language_pretraining(c, [](int epoch, double loss) {
    std::cout << "epoch " << epoch << " loss " << loss << std::endl;
  });
  save_store(plm_checkpoint_path(c), result.model.params(), plm_fingerprint(c));
  std::cout << "heldout exact match " << result.metrics.heldout_exact_match << "\n";
  for (const auto& [kind, em] : result.metrics.heldout_by_kind) std::cout << "  " << kind << " " << em << "\n";
  std::cout << "wrote " << plm_checkpoint_path(c).string() << "\n";
  return 0;
}

int cmd_pretrain_encoders(const Overrides& o) {
  ExperimentConfig c = resolve(o);
  if (o.out) c.artifacts = *o.out;
  const EncoderDecoderModel plm(resolved_model_config(c),
                                load_checkpoint(plm_checkpoint_path(c), plm_fingerprint(c)).params);
  VisionEncoder vision(c.vision, c.encoder_pretrain.seed);
  AudioEncoder audio(c.audio, c.encoder_pretrain.seed + 1);
  const auto report = run_encoder_pretraining(c, plm, vision, audio);
  save_store(vision_checkpoint_path(c), vision.params(), vision_fingerprint(c));
  save_store(audio_checkpoint_path(c), audio.params(), audio_fingerprint(c));
  std::cout << "vision heldout accuracy " << report.vision.heldout_accuracy << " alignment error "
            << report.vision.heldout_alignment_error << "\n"
            << "audio heldout accuracy " << report.audio.heldout_accuracy << " alignment error "
            << report.audio.heldout_alignment_error << "\n";
  return 0;
}

int cmd_train(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  const fs::path out = out_dir(o, "runs");
  const auto result = run_experiment(c, out);
  std::cout << summary_table(result.records);
  std::cout << "wrote " << (out / "metrics.jsonl").string() << "\n";
  return 0;
}

int cmd_eval(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  const fs::path out = out_dir(o, "runs");
  const auto components = load_pretrained(c);
  const TaskData data = build_task_data(c);
  std::vector<MetricsRecord> records;
  for (FusionMethod m : c.methods) {
    for (std::uint64_t seed : c.seeds) {
      const std::string id = run_id(c, m, seed);
      const FusionSystem system = restore_run(c, components, m, seed, out / "checkpoints" / (id + ".pfck"));
      const auto features = system.precompute_features(data.eval);
      const EvalMetrics eval = evaluate(system, data.eval, &features);
      MetricsRecord r;
      r.run_id = id;
      r.seed = seed;
      r.method = method_name(m);
      r.shots = c.shots_label();
      r.prompt_length = system.spec().bank.length;
      r.scores = score_columns(c.task, eval);
      records.push_back(r);
    }
  }
  emit_metrics(records, out / "eval.jsonl", out / "eval_summary.txt");
  std::cout << summary_table(records);
  return 0;
}

int cmd_sweep(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  const fs::path out = out_dir(o, "sweep");
  const auto result = run_prompt_length_sweep(c, out);
  std::cout << io::read_file((out / "grid.txt").string());
  return 0;
}

int cmd_attribute(const Overrides& o, std::size_t count) {
  const ExperimentConfig c = resolve(o);
  const fs::path out = out_dir(o, "runs");
  const auto components = load_pretrained(c);
  const TaskData data = build_task_data(c);
  const Vocab& vocab = lab_vocabulary();
  for (FusionMethod m : c.methods) {
    for (std::uint64_t seed : c.seeds) {
      const std::string id = run_id(c, m, seed);
      const FusionSystem system = restore_run(c, components, m, seed, out / "checkpoints" / (id + ".pfck"));
      for (std::size_t i = 0; i < std::min(count, data.eval.size()); ++i) {
        const auto result = attribute_calibrated(system, data.eval[i], c.ig.tolerance, c.ig.steps, c.ig.max_steps);
        const auto check = completeness_check(result.ig, c.ig.tolerance);
        const std::string stem = id + "-ex" + std::to_string(i);
        export_attribution(result, vocab, out / "attribution", stem);
        std::cout << stem << " prediction '" << vocab.decode(result.prediction) << "' image share "
                  << std::fixed << std::setprecision(3) << result.image_share << " steps " << result.ig.steps
                  << " delta " << std::scientific << result.ig.delta << (check.pass ? "" : " (above tolerance)")
                  << std::defaultfloat << "\n";
      }
    }
  }
  return 0;
}

int cmd_count_params(const Overrides& o, std::size_t d_model, std::size_t d_visual) {
  ParamCountConfig pc;
  pc.d_model = d_model;
  pc.d_visual = d_visual;
  pc.prompt_length = static_cast<std::size_t>(o.prompt_length.value_or(20));
  ExperimentConfig c = resolve(Overrides{o.config, {}, {}, {}, {}, {}});
  pc.prompt_encoder = c.prompt.encoder;
  pc.encoder_params = VisionEncoder(c.vision, 0).params().scalar_count();
  std::cout << "d=" << d_model << " d_v=" << d_visual << " N=" << pc.prompt_length << "\n";
  for (FusionMethod m : {FusionMethod::kFinetune, FusionMethod::kLinear, FusionMethod::kJointProj,
                         FusionMethod::kPromptFuse, FusionMethod::kBlindPrompt}) {
    std::cout << std::left << std::setw(12) << method_name(m) << count_trainable_params(pc, m);
    if (m == FusionMethod::kFinetune) std::cout << " (configured vision encoder)";
    std::cout << "\n";
  }
  return 0;
}

int cmd_gen_data(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  const fs::path out = out_dir(o, "data");
  fs::create_directories(out);
  const SplitSizes sizes{c.data.train_pool, c.data.eval};
  std::string lines;
  auto image_rows = [](const RawImage& img) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t y = 0; y < img.height; ++y) {
      std::string row;
      for (std::size_t x = 0; x < img.width; ++x) {
        row += img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2) > 0 ? '#' : '.';
      }
      rows.push_back(row);
    }
    return rows;
  };
  if (c.task == TaskKind::kVqa2Mod) {
    const auto splits = build_qa_splits(sizes, c.data.seed);
    for (const auto* part : {&splits.train, &splits.eval}) {
      const char* split = part == &splits.train ? "train" : "eval";
      for (const auto& s : *part) {
        nlohmann::json objects = nlohmann::json::array();
        for (const auto& ob : s.scene.objects) {
          objects.push_back({{"form", form_word(ob.form)}, {"color", color_word(ob.color)}, {"row", ob.row},
                             {"col", ob.col}});
        }
        nlohmann::json j = {{"split", split},          {"seed", s.seed},
                            {"type", question_type_name(s.type)}, {"question", s.question},
                            {"answer", s.answer},      {"objects", objects},
                            {"image", image_rows(s.scene.image)}};
        lines += j.dump() + "\n";
      }
    }
  } else {
    const auto splits = build_trimodal_splits(sizes, c.data.seed);
    for (const auto* part : {&splits.train, &splits.eval}) {
      const char* split = part == &splits.train ? "train" : "eval";
      for (const auto& s : *part) {
        nlohmann::json j = {{"split", split},
                            {"seed", s.seed},
                            {"utterance", s.utterance},
                            {"text_positive", s.text_positive},
                            {"tone_positive", s.tone_positive},
                            {"frames", s.frames.size()},
                            {"audio_windows", s.audio_windows.size()},
                            {"answer", s.verbalized}};
        lines += j.dump() + "\n";
      }
    }
  }
  const fs::path path = out / (std::string(task_name(c.task)) + ".jsonl");
  io::write_file(path.string(), lines);
  std::cout << "wrote " << path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"promptfuse: prompt-vector multimodal fusion laboratory"};
  app.require_subcommand(1);
  Overrides o;
  std::size_t attribute_count = 4;
  std::size_t d_model = 768, d_visual = 768;

  auto* pretrain_plm = app.add_subcommand("pretrain-plm", "pretrain the language model");
  auto* pretrain_enc = app.add_subcommand("pretrain-encoders", "pretrain the vision and audio encoders");
  auto* train_cmd = app.add_subcommand("train", "fusion runs over methods x seeds");
  auto* eval_cmd = app.add_subcommand("eval", "re-evaluate saved fusion runs");
  auto* sweep_cmd = app.add_subcommand("sweep", "prompt-length sweep");
  auto* attr_cmd = app.add_subcommand("attribute", "integrated gradients on saved runs");
  auto* count_cmd = app.add_subcommand("count-params", "trainable parameter counts per method");
  auto* gen_cmd = app.add_subcommand("gen-data", "write generated task samples as JSON lines");
  for (auto* cmd : {pretrain_plm, pretrain_enc, train_cmd, eval_cmd, sweep_cmd, attr_cmd, count_cmd, gen_cmd}) {
    add_common(cmd, o);
  }
  attr_cmd->add_option("--count", attribute_count, "evaluation examples to attribute");
  count_cmd->add_option("--d-model", d_model, "language model width d");
  count_cmd->add_option("--d-visual", d_visual, "visual feature width d_v");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << category_name(ErrorCategory::kInvalidArgument) << ": " << e.what() << "\n";
    return exit_code(ErrorCategory::kInvalidArgument);
  }

  try {
    if (*pretrain_plm) return cmd_pretrain_plm(o);
    if (*pretrain_enc) return cmd_pretrain_encoders(o);
    if (*train_cmd) return cmd_train(o);
    if (*eval_cmd) return cmd_eval(o);
    if (*sweep_cmd) return cmd_sweep(o);
    if (*attr_cmd) return cmd_attribute(o, attribute_count);
    if (*count_cmd) return cmd_count_params(o, d_model, d_visual);
    if (*gen_cmd) return cmd_gen_data(o);
  } catch (const Error& e) {
    std::cerr << "error: " << category_name(e.category()) << ": " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << category_name(ErrorCategory::kIo) << ": " << e.what() << "\n";
    return exit_code(ErrorCategory::kIo);
  }
  return 0;
}
