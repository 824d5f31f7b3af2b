// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptfuse/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "promptfuse/binary_io.hpp"

namespace promptfuse {

using nlohmann::json;

const char* task_name(TaskKind t) { return t == TaskKind::kVqa2Mod ? "vqa2mod" : "trimodal"; }

TaskKind parse_task(const std::string& name) {
  if (name == "vqa2mod") return TaskKind::kVqa2Mod;
  if (name == "trimodal") return TaskKind::kTrimodal;
  fail(ErrorCategory::kConfig, "unknown task '" + name + "'");
}

PoolingMode ExperimentConfig::effective_pooling() const {
  if (pooling) return *pooling;
  return task == TaskKind::kVqa2Mod ? PoolingMode::kCls : PoolingMode::kAverage;
}

std::string ExperimentConfig::shots_label() const { return shots ? std::to_string(*shots) : "full"; }

TrainConfig default_train_config(TaskKind task, bool full_data) {
  TrainConfig t;
  t.prompt_learning_rate = 5e-1;
  t.learning_rate = 5e-4;
  if (task == TaskKind::kVqa2Mod) {
    t.batch_size = 32;
    t.epochs = full_data ? 2 : 100;
  } else {
    t.batch_size = 8;
    t.epochs = full_data ? 5 : 50;
  }
  return t;
}

std::vector<std::uint64_t> default_seeds(TaskKind task) {
  std::vector<std::uint64_t> seeds(task == TaskKind::kVqa2Mod ? 3 : 10);
  std::iota(seeds.begin(), seeds.end(), 1);
  return seeds;
}

// ---------------------------------------------------------------------------
// Config documents

namespace {

// Reads keys of one JSON object and rejects any key that was not consumed.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail(ErrorCategory::kConfig, "'" + where_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    const json* v = find(key);
    if (!v) return;
    try {
      out = v->get<T>();
    } catch (const json::exception&) {
      fail(ErrorCategory::kConfig, "'" + path(key) + "' has the wrong type");
    }
  }

  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail(ErrorCategory::kConfig, "unknown config key '" + path(it.key().c_str()) + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename Fn>
void with_object(ObjectReader& parent, const char* key, Fn fn) {
  if (const json* v = parent.find(key)) {
    ObjectReader r(*v, parent.path(key));
    fn(r);
    r.finish();
  }
}

json model_json(const ModelConfig& m) {
  return {{"d_model", m.d_model},         {"heads", m.heads}, {"encoder_layers", m.encoder_layers},
          {"decoder_layers", m.decoder_layers}, {"ffn", m.ffn},     {"max_len", m.max_len},
          {"max_decoder_len", m.max_decoder_len}};
}

json vision_json(const VisionEncoderConfig& v) {
  return {{"image_size", v.image_size}, {"patch", v.patch}, {"width", v.width},
          {"heads", v.heads},           {"layers", v.layers}, {"ffn", v.ffn}};
}

json audio_json(const AudioEncoderConfig& a) {
  return {{"window", a.window},   {"kernel1", a.kernel1}, {"stride1", a.stride1}, {"channels1", a.channels1},
          {"kernel2", a.kernel2}, {"stride2", a.stride2}, {"width", a.width}};
}

json plm_pretrain_json(const LanguagePretrainConfig& p) {
  return {{"qa_examples", p.qa_examples},
          {"trimodal_examples", p.trimodal_examples},
          {"heldout_qa", p.heldout_qa},
          {"heldout_trimodal", p.heldout_trimodal},
          {"summary_fraction", p.summary_fraction},
          {"caption_fraction", p.caption_fraction},
          {"data_seed", p.data_seed},
          {"epochs", p.train.epochs},
          {"batch_size", p.train.batch_size},
          {"learning_rate", p.train.learning_rate},
          {"seed", p.train.seed},
          {"position_jitter", p.train.position_jitter}};
}

json encoder_pretrain_json(const EncoderPretrainConfig& e) {
  return {{"epochs", e.epochs}, {"batch_size", e.batch_size}, {"learning_rate", e.learning_rate},
          {"seed", e.seed},     {"scenes", e.scenes},         {"frames", e.frames},
          {"windows", e.windows}, {"align_weight", e.align_weight}};
}

json train_json(const TrainConfig& t) {
  return {{"prompt_learning_rate", t.prompt_learning_rate},
          {"learning_rate", t.learning_rate},
          {"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"gradient_accumulation", t.gradient_accumulation},
          {"max_steps", t.max_steps},
          {"evaluate_each_epoch", t.evaluate_each_epoch}};
}

std::uint64_t hash_json(const json& j) {
  const std::string s = j.dump();
  return fnv1a(std::as_bytes(std::span<const char>(s.data(), s.size())));
}

}  // namespace

ExperimentConfig parse_experiment_config(const json& doc) {
  ExperimentConfig c;
  ObjectReader r(doc, "");
  std::string task = task_name(c.task);
  r.get("task", task);
  c.task = parse_task(task);

  if (const json* shots = r.find("shots")) {
    if (shots->is_string() && shots->get<std::string>() == "full") {
      c.shots.reset();
    } else if (shots->is_number_integer() && shots->get<long long>() >= 0) {
      c.shots = shots->get<std::size_t>();
    } else {
      fail(ErrorCategory::kConfig, "'shots' must be a non-negative integer or \"full\"");
    }
  }
  c.seeds = default_seeds(c.task);
  c.train = default_train_config(c.task, !c.shots.has_value());

  if (const json* methods = r.find("methods")) {
    if (!methods->is_array() || methods->empty()) fail(ErrorCategory::kConfig, "'methods' must be a non-empty list");
    c.methods.clear();
    for (const auto& m : *methods) {
      if (!m.is_string()) fail(ErrorCategory::kConfig, "'methods' entries must be strings");
      c.methods.push_back(parse_method(m.get<std::string>()));
    }
  }
  r.get("seeds", c.seeds);
  if (c.seeds.empty()) fail(ErrorCategory::kConfig, "'seeds' must not be empty");

  with_object(r, "data", [&](ObjectReader& o) {
    o.get("train_pool", c.data.train_pool);
    o.get("eval", c.data.eval);
    o.get("seed", c.data.seed);
  });
  with_object(r, "model", [&](ObjectReader& o) {
    o.get("d_model", c.model.d_model);
    o.get("heads", c.model.heads);
    o.get("encoder_layers", c.model.encoder_layers);
    o.get("decoder_layers", c.model.decoder_layers);
    o.get("ffn", c.model.ffn);
    o.get("max_len", c.model.max_len);
    o.get("max_decoder_len", c.model.max_decoder_len);
  });
  with_object(r, "vision", [&](ObjectReader& o) {
    o.get("image_size", c.vision.image_size);
    o.get("patch", c.vision.patch);
    o.get("width", c.vision.width);
    o.get("heads", c.vision.heads);
    o.get("layers", c.vision.layers);
    o.get("ffn", c.vision.ffn);
  });
  with_object(r, "audio", [&](ObjectReader& o) {
    o.get("window", c.audio.window);
    o.get("kernel1", c.audio.kernel1);
    o.get("stride1", c.audio.stride1);
    o.get("channels1", c.audio.channels1);
    o.get("kernel2", c.audio.kernel2);
    o.get("stride2", c.audio.stride2);
    o.get("width", c.audio.width);
  });
  with_object(r, "plm_pretrain", [&](ObjectReader& o) {
    auto& p = c.plm_pretrain;
    o.get("qa_examples", p.qa_examples);
    o.get("trimodal_examples", p.trimodal_examples);
    o.get("heldout_qa", p.heldout_qa);
    o.get("heldout_trimodal", p.heldout_trimodal);
    o.get("summary_fraction", p.summary_fraction);
    o.get("caption_fraction", p.caption_fraction);
    o.get("data_seed", p.data_seed);
    o.get("epochs", p.train.epochs);
    o.get("batch_size", p.train.batch_size);
    o.get("learning_rate", p.train.learning_rate);
    o.get("seed", p.train.seed);
    o.get("position_jitter", p.train.position_jitter);
  });
  with_object(r, "encoder_pretrain", [&](ObjectReader& o) {
    auto& e = c.encoder_pretrain;
    o.get("epochs", e.epochs);
    o.get("batch_size", e.batch_size);
    o.get("learning_rate", e.learning_rate);
    o.get("seed", e.seed);
    o.get("scenes", e.scenes);
    o.get("frames", e.frames);
    o.get("windows", e.windows);
    o.get("align_weight", e.align_weight);
  });
  with_object(r, "train", [&](ObjectReader& o) {
    o.get("prompt_learning_rate", c.train.prompt_learning_rate);
    o.get("learning_rate", c.train.learning_rate);
    o.get("batch_size", c.train.batch_size);
    o.get("epochs", c.train.epochs);
    o.get("gradient_accumulation", c.train.gradient_accumulation);
    o.get("max_steps", c.train.max_steps);
    o.get("evaluate_each_epoch", c.train.evaluate_each_epoch);
  });
  with_object(r, "prompt", [&](ObjectReader& o) {
    o.get("length", c.prompt.length);
    std::string position = position_name(c.prompt.position), encoder = prompt_encoder_name(c.prompt.encoder);
    o.get("position", position);
    o.get("encoder", encoder);
    c.prompt.position = parse_position(position);
    c.prompt.encoder = parse_prompt_encoder(encoder);
  });
  if (const json* pooling = r.find("pooling")) {
    if (!pooling->is_string()) fail(ErrorCategory::kConfig, "'pooling' must be a string");
    c.pooling = parse_pooling(pooling->get<std::string>());
  }
  with_object(r, "ig", [&](ObjectReader& o) {
    o.get("steps", c.ig.steps);
    o.get("tolerance", c.ig.tolerance);
    o.get("max_steps", c.ig.max_steps);
  });
  r.get("sweep_prompt_lengths", c.sweep_prompt_lengths);
  std::string artifacts = c.artifacts.string();
  r.get("artifacts", artifacts);
  c.artifacts = artifacts;
  r.finish();

  if (c.prompt.length < 0) fail(ErrorCategory::kConfig, "prompt length must be non-negative");
  if (c.data.train_pool == 0 || c.data.eval == 0) fail(ErrorCategory::kConfig, "data sizes must be positive");
  if (c.plm_pretrain.summary_fraction < 0 || c.plm_pretrain.summary_fraction > 1 ||
      c.plm_pretrain.caption_fraction < 0 || c.plm_pretrain.caption_fraction >= 1) {
    fail(ErrorCategory::kConfig, "pretraining fractions out of range");
  }
  resolved_model_config(c).validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(io::read_file(path.string()));
  } catch (const json::parse_error& e) {
    fail(ErrorCategory::kConfig, "'" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_experiment_config(doc);
}

json to_json(const ExperimentConfig& c) {
  json methods = json::array();
  for (auto m : c.methods) methods.push_back(method_name(m));
  json j;
  j["task"] = task_name(c.task);
  j["methods"] = methods;
  j["shots"] = c.shots ? json(*c.shots) : json("full");
  j["seeds"] = c.seeds;
  j["data"] = {{"train_pool", c.data.train_pool}, {"eval", c.data.eval}, {"seed", c.data.seed}};
  j["model"] = model_json(c.model);
  j["vision"] = vision_json(c.vision);
  j["audio"] = audio_json(c.audio);
  j["plm_pretrain"] = plm_pretrain_json(c.plm_pretrain);
  j["encoder_pretrain"] = encoder_pretrain_json(c.encoder_pretrain);
  j["train"] = train_json(c.train);
  j["prompt"] = {{"length", c.prompt.length},
                 {"position", position_name(c.prompt.position)},
                 {"encoder", prompt_encoder_name(c.prompt.encoder)}};
  if (c.pooling) j["pooling"] = pooling_name(*c.pooling);
  j["ig"] = {{"steps", c.ig.steps}, {"tolerance", c.ig.tolerance}, {"max_steps", c.ig.max_steps}};
  j["sweep_prompt_lengths"] = c.sweep_prompt_lengths;
  j["artifacts"] = c.artifacts.string();
  return j;
}

ModelConfig resolved_model_config(const ExperimentConfig& config) {
  ModelConfig m = config.model;
  m.vocab_size = static_cast<int>(lab_vocabulary().size());
  return m;
}

std::uint64_t plm_fingerprint(const ExperimentConfig& config) {
  return hash_json({{"model", model_json(resolved_model_config(config))},
                    {"vocab", lab_vocabulary().size()},
                    {"pretrain", plm_pretrain_json(config.plm_pretrain)}});
}

std::uint64_t vision_fingerprint(const ExperimentConfig& config) {
  return hash_json({{"plm", plm_fingerprint(config)},
                    {"vision", vision_json(config.vision)},
                    {"pretrain", encoder_pretrain_json(config.encoder_pretrain)}});
}

std::uint64_t audio_fingerprint(const ExperimentConfig& config) {
  return hash_json({{"plm", plm_fingerprint(config)},
                    {"audio", audio_json(config.audio)},
                    {"pretrain", encoder_pretrain_json(config.encoder_pretrain)}});
}

std::uint64_t fusion_fingerprint(const ExperimentConfig& config, FusionMethod method) {
  return hash_json({{"plm", plm_fingerprint(config)},
                    {"vision", vision_fingerprint(config)},
                    {"audio", audio_fingerprint(config)},
                    {"task", task_name(config.task)},
                    {"method", method_name(method)},
                    {"prompt",
                     {config.prompt.length, position_name(config.prompt.position),
                      prompt_encoder_name(config.prompt.encoder)}},
                    {"pooling", pooling_name(config.effective_pooling())}});
}

// ---------------------------------------------------------------------------
// Pretraining stages

LanguageCorpus build_language_corpus(const LanguagePretrainConfig& config, const Vocab& vocab) {
  LanguageCorpus corpus;
  std::mt19937_64 rng(config.data_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto qa = [&](std::uint64_t stream, std::size_t i) {
    const Scene scene = generate_scene(derive_seed(config.data_seed, stream, i), SceneSpec{});
    return generate_qa(scene, derive_seed(config.data_seed, stream + 1, i));
  };
  // QA and trimodal examples are interleaved so epochs see both from the start.
  const std::size_t total = config.qa_examples + config.trimodal_examples;
  std::size_t next_qa = 0, next_tri = 0;
  for (std::size_t i = 0; i < total; ++i) {
    const bool want_qa =
        next_tri >= config.trimodal_examples ||
        (next_qa < config.qa_examples && next_qa * config.trimodal_examples <= next_tri * config.qa_examples);
    const PretrainTask task = unit(rng) < config.caption_fraction ? PretrainTask::kCaption : PretrainTask::kAnswer;
    if (want_qa) {
      const auto rendering = unit(rng) < config.summary_fraction ? SceneRendering::kSummary : SceneRendering::kWords;
      corpus.train.push_back(text_only_example(qa(1, next_qa++), vocab, rendering, task));
    } else {
      corpus.train.push_back(
          text_only_example(generate_trimodal(derive_seed(config.data_seed, 3, next_tri++)), vocab, task));
    }
  }
  for (std::size_t i = 0; i < config.heldout_qa; ++i) {
    corpus.heldout.push_back(text_only_example(qa(11, i), vocab, SceneRendering::kSummary, PretrainTask::kAnswer));
  }
  for (std::size_t i = 0; i < config.heldout_trimodal; ++i) {
    corpus.heldout.push_back(
        text_only_example(generate_trimodal(derive_seed(config.data_seed, 13, i)), vocab, PretrainTask::kAnswer));
  }
  return corpus;
}

PretrainResult run_language_pretraining(const ExperimentConfig& config, const EpochCallback& on_epoch) {
  const auto corpus = build_language_corpus(config.plm_pretrain, lab_vocabulary());
  return pretrain_language_model(corpus.train, corpus.heldout, resolved_model_config(config),
                                 config.plm_pretrain.train, on_epoch);
}

EncoderPretrainReport run_encoder_pretraining(const ExperimentConfig& config, const EncoderDecoderModel& plm,
                                              VisionEncoder& vision, AudioEncoder& audio) {
  const AlignmentTargets targets{&plm.params().at(EncoderDecoderModel::token_embedding_name()), &lab_vocabulary()};
  EncoderPretrainReport report;
  report.vision = pretrain_vision_encoder(vision, config.encoder_pretrain, &targets);
  report.audio = pretrain_audio_encoder(audio, config.encoder_pretrain, &targets);
  return report;
}

std::filesystem::path plm_checkpoint_path(const ExperimentConfig& config) { return config.artifacts / "plm.pfck"; }
std::filesystem::path vision_checkpoint_path(const ExperimentConfig& config) {
  return config.artifacts / "vision.pfck";
}
std::filesystem::path audio_checkpoint_path(const ExperimentConfig& config) {
  return config.artifacts / "audio.pfck";
}

namespace {

Checkpoint whole_store(const ParameterStore& store, std::uint64_t fingerprint) {
  return collect_checkpoint({&store}, store.names(), fingerprint);
}

void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCategory::kIo, "cannot create '" + dir.string() + "': " + ec.message());
}

}  // namespace

PretrainedComponents load_pretrained(const ExperimentConfig& config) {
  PretrainedComponents c{
      EncoderDecoderModel(resolved_model_config(config),
                          load_checkpoint(plm_checkpoint_path(config), plm_fingerprint(config)).params),
      std::nullopt, std::nullopt};
  c.vision.emplace(config.vision,
                   load_checkpoint(vision_checkpoint_path(config), vision_fingerprint(config)).params);
  if (config.task == TaskKind::kTrimodal) {
    c.audio.emplace(config.audio, load_checkpoint(audio_checkpoint_path(config), audio_fingerprint(config)).params);
  }
  return c;
}

PretrainedComponents ensure_pretrained(const ExperimentConfig& config, std::ostream* log) {
  namespace fs = std::filesystem;
  auto say = [&](const std::string& line) {
    if (log) *log << line << "\n" << std::flush;
  };
  bool plm_fresh = false;
  if (!fs::exists(plm_checkpoint_path(config))) {
    ensure_directory(config.artifacts);
    const auto start = std::chrono::steady_clock::now();
    auto result = run_language_pretraining(config, [&](int epoch, double loss) {
      std::ostringstream s;
      s << "pretrain-plm epoch " << epoch << " loss " << loss;
      say(s.str());
    });
    save_checkpoint(plm_checkpoint_path(config), whole_store(result.model.params(), plm_fingerprint(config)));
    std::ostringstream s;
    s << "pretrain-plm heldout exact match " << result.metrics.heldout_exact_match << " in "
      << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << " s";
    say(s.str());
    plm_fresh = true;
  }
  if (plm_fresh || !fs::exists(vision_checkpoint_path(config)) || !fs::exists(audio_checkpoint_path(config))) {
    const EncoderDecoderModel plm(resolved_model_config(config),
                                  load_checkpoint(plm_checkpoint_path(config), plm_fingerprint(config)).params);
    VisionEncoder vision(config.vision, config.encoder_pretrain.seed);
    AudioEncoder audio(config.audio, config.encoder_pretrain.seed + 1);
    const auto start = std::chrono::steady_clock::now();
    const auto report = run_encoder_pretraining(config, plm, vision, audio);
    save_checkpoint(vision_checkpoint_path(config), whole_store(vision.params(), vision_fingerprint(config)));
    save_checkpoint(audio_checkpoint_path(config), whole_store(audio.params(), audio_fingerprint(config)));
    std::ostringstream s;
    s << "pretrain-encoders vision accuracy " << report.vision.heldout_accuracy << " alignment error "
      << report.vision.heldout_alignment_error << ", audio accuracy " << report.audio.heldout_accuracy
      << " alignment error " << report.audio.heldout_alignment_error << " in "
      << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << " s";
    say(s.str());
  }
  return load_pretrained(config);
}

// ---------------------------------------------------------------------------
// Metrics records

namespace {

// Records keep their score order, which plain json (sorted keys) would lose.
nlohmann::ordered_json ordered_record(const MetricsRecord& r) {
  nlohmann::ordered_json s = nlohmann::ordered_json::object();
  for (const auto& [k, v] : r.scores) s[k] = v;
  nlohmann::ordered_json j;
  j["run_id"] = r.run_id;
  j["seed"] = r.seed;
  j["method"] = r.method;
  j["shots"] = r.shots;
  j["prompt_length"] = r.prompt_length;
  j["epoch"] = r.epoch;
  j["loss"] = r.loss;
  j["scores"] = s;
  return j;
}

template <typename Json>
MetricsRecord record_from(const Json& j) {
  MetricsRecord r;
  try {
    r.run_id = j.at("run_id").template get<std::string>();
    r.seed = j.at("seed").template get<std::uint64_t>();
    r.method = j.at("method").template get<std::string>();
    r.shots = j.at("shots").template get<std::string>();
    r.prompt_length = j.at("prompt_length").template get<int>();
    r.epoch = j.at("epoch").template get<int>();
    r.loss = j.at("loss").template get<double>();
    for (auto it = j.at("scores").begin(); it != j.at("scores").end(); ++it) {
      r.scores.emplace_back(it.key(), it.value().template get<double>());
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::kInvalidArgument, std::string("malformed metrics record: ") + e.what());
  }
  return r;
}

}  // namespace

nlohmann::ordered_json MetricsRecord::to_json() const { return ordered_record(*this); }

MetricsRecord MetricsRecord::from_json(const nlohmann::ordered_json& j) { return record_from(j); }

std::vector<std::pair<std::string, double>> score_columns(TaskKind task, const EvalMetrics& eval) {
  auto pct = [](double v) { return 100.0 * v; };
  if (task == TaskKind::kVqa2Mod) {
    auto kind = [&](const char* k) {
      auto it = eval.accuracy_by_kind.find(k);
      return it == eval.accuracy_by_kind.end() ? 0.0 : pct(it->second);
    };
    return {{"Other", kind("Other")}, {"YesNo", kind("YesNo")}, {"Number", kind("Number")},
            {"Overall", pct(eval.accuracy)}};
  }
  return {{"Precision", pct(eval.precision.value_or(0.0))},
          {"Recall", pct(eval.recall.value_or(0.0))},
          {"F-Score", pct(eval.f1.value_or(0.0))}};
}

std::string format_mean_std(const std::vector<double>& values) {
  if (values.empty()) fail(ErrorCategory::kInvalidArgument, "mean of no values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = values.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  std::ostringstream out;
  out << std::fixed << std::setprecision(1) << mean << "±" << sd;
  return out.str();
}

namespace {

// Final-epoch record of every run, in first-seen order.
std::vector<MetricsRecord> final_records(const std::vector<MetricsRecord>& records) {
  std::vector<std::string> order;
  std::map<std::string, MetricsRecord> last;
  for (const auto& r : records) {
    auto it = last.find(r.run_id);
    if (it == last.end()) {
      order.push_back(r.run_id);
      last.emplace(r.run_id, r);
    } else if (r.epoch >= it->second.epoch) {
      it->second = r;
    }
  }
  std::vector<MetricsRecord> out;
  for (const auto& id : order) out.push_back(last.at(id));
  return out;
}

std::string header_name(const std::string& score) { return score == "YesNo" ? "Yes/No" : score; }

std::string pad(const std::string& s, std::size_t width) {
  // Count code points so "±" takes one column.
  std::size_t cols = 0;
  for (unsigned char ch : s) cols += (ch & 0xc0) != 0x80;
  return s + std::string(width > cols ? width - cols : 1, ' ');
}

}  // namespace

std::string summary_table(const std::vector<MetricsRecord>& records) {
  const auto finals = final_records(records);
  if (finals.empty()) fail(ErrorCategory::kInvalidArgument, "no metrics records to summarize");
  struct Group {
    std::string method, shots;
    int prompt_length;
    std::vector<MetricsRecord> runs;
  };
  std::vector<Group> groups;
  for (const auto& r : finals) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) {
      return g.method == r.method && g.shots == r.shots && g.prompt_length == r.prompt_length;
    });
    if (it == groups.end()) {
      groups.push_back({r.method, r.shots, r.prompt_length, {}});
      it = groups.end() - 1;
    }
    it->runs.push_back(r);
  }
  std::ostringstream out;
  out << pad("Method", 13) << pad("Shots", 7) << pad("N", 5) << pad("Runs", 6);
  for (const auto& [name, _] : finals.front().scores) out << pad(header_name(name), 12);
  out << "\n";
  for (const auto& g : groups) {
    out << pad(g.method, 13) << pad(g.shots, 7) << pad(std::to_string(g.prompt_length), 5)
        << pad(std::to_string(g.runs.size()), 6);
    for (std::size_t k = 0; k < finals.front().scores.size(); ++k) {
      std::vector<double> v;
      for (const auto& r : g.runs) v.push_back(r.scores.at(k).second);
      out << pad(format_mean_std(v), 12);
    }
    out << "\n";
  }
  return out.str();
}

std::string sweep_grid(const std::vector<MetricsRecord>& records, const std::string& score) {
  const auto finals = final_records(records);
  if (finals.empty()) fail(ErrorCategory::kInvalidArgument, "no metrics records for the sweep grid");
  std::vector<std::string> methods;
  std::set<int> lengths;
  std::map<std::pair<std::string, int>, std::vector<double>> cells;
  for (const auto& r : finals) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    lengths.insert(r.prompt_length);
    auto it = std::find_if(r.scores.begin(), r.scores.end(), [&](const auto& s) { return s.first == score; });
    if (it == r.scores.end()) fail(ErrorCategory::kInvalidArgument, "records have no score '" + score + "'");
    cells[{r.method, r.prompt_length}].push_back(it->second);
  }
  std::ostringstream out;
  out << pad("N", 13);
  for (int n : lengths) out << pad(std::to_string(n), 8);
  out << "\n";
  for (const auto& m : methods) {
    out << pad(m, 13);
    for (int n : lengths) {
      auto it = cells.find({m, n});
      if (it == cells.end()) {
        out << pad("-", 8);
        continue;
      }
      const double mean = std::accumulate(it->second.begin(), it->second.end(), 0.0) /
                          static_cast<double>(it->second.size());
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(1) << mean;
      out << pad(cell.str(), 8);
    }
    out << "\n";
  }
  return out.str();
}

void emit_metrics(const std::vector<MetricsRecord>& records, const std::filesystem::path& jsonl,
                  const std::filesystem::path& summary) {
  if (records.empty()) fail(ErrorCategory::kInvalidArgument, "no metrics records to emit");
  std::string lines;
  for (const auto& r : records) lines += ordered_record(r).dump() + "\n";
  io::write_file(jsonl.string(), lines);
  io::write_file(summary.string(), summary_table(records));
}

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& jsonl) {
  std::istringstream in(io::read_file(jsonl.string()));
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::ordered_json::parse_error& e) {
      fail(ErrorCategory::kInvalidArgument, std::string("malformed metrics line: ") + e.what());
    }
    out.push_back(record_from(j));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fusion runs

TaskData build_task_data(const ExperimentConfig& config) {
  TaskData d;
  const SplitSizes sizes{config.data.train_pool, config.data.eval};
  const Vocab& vocab = lab_vocabulary();
  if (config.task == TaskKind::kVqa2Mod) {
    const auto splits = build_qa_splits(sizes, config.data.seed);
    for (const auto& s : splits.train) d.train_pool.push_back(to_fusion_example(s, vocab));
    for (const auto& s : splits.eval) d.eval.push_back(to_fusion_example(s, vocab));
    d.eval_histogram = splits.eval_histogram;
  } else {
    const auto splits = build_trimodal_splits(sizes, config.data.seed);
    for (const auto& s : splits.train) d.train_pool.push_back(to_fusion_example(s, vocab));
    for (const auto& s : splits.eval) d.eval.push_back(to_fusion_example(s, vocab));
    d.eval_histogram = splits.eval_histogram;
  }
  return d;
}

FusionSpec fusion_spec_for(const ExperimentConfig& config, FusionMethod method) {
  FusionSpec spec;
  spec.method = method;
  spec.bank = config.prompt;
  spec.pooling = config.effective_pooling();
  if (config.task == TaskKind::kVqa2Mod) {
    spec.slots = {{"vision", ModalitySlot::Encoder::kVision}};
  } else {
    spec.slots = {{"video", ModalitySlot::Encoder::kVision}, {"audio", ModalitySlot::Encoder::kAudio}};
  }
  return spec;
}

std::string run_id(const ExperimentConfig& config, FusionMethod method, std::uint64_t seed) {
  return std::string(task_name(config.task)) + "-" + method_name(method) + "-" + config.shots_label() + "-N" +
         std::to_string(uses_prompts(method) ? config.prompt.length : 0) + "-s" + std::to_string(seed);
}

namespace {

MetricsRecord make_record(const ExperimentConfig& config, FusionMethod method, std::uint64_t seed,
                          const FusionSystem& system, int epoch, double loss, const EvalMetrics& eval) {
  MetricsRecord r;
  r.run_id = run_id(config, method, seed);
  r.seed = seed;
  r.method = method_name(method);
  r.shots = config.shots_label();
  r.prompt_length = system.spec().bank.length;
  r.epoch = epoch;
  r.loss = loss;
  r.scores = score_columns(config.task, eval);
  return r;
}

std::vector<std::string> fusion_names(const FusionSystem& system, FusionMethod method) {
  std::vector<std::string> names = system.fusion_params().names();
  // Fine-tuned encoders belong to the run as well.
  if (method == FusionMethod::kFinetune) {
    for (const ParameterStore* s : system.stores()) {
      for (const auto& n : s->names())
        if (n.rfind("vision.", 0) == 0 || n.rfind("audio.", 0) == 0) names.push_back(n);
    }
  }
  return names;
}

}  // namespace

RunOutcome run_single(const ExperimentConfig& config, const PretrainedComponents& components,
                      const TaskData& data, FusionMethod method, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  const std::size_t k = config.shots.value_or(data.train_pool.size());
  if (k == 0 || k > data.train_pool.size()) {
    fail(ErrorCategory::kInfeasible, "cannot draw " + std::to_string(k) + " shots from a pool of " +
                                         std::to_string(data.train_pool.size()) + " examples");
  }
  FusionSystem system(components.plm, components.vision, components.audio, fusion_spec_for(config, method), seed);
  const auto partition = partition_parameters(system, method);
  const auto sample = sample_few_shot(data.train_pool, k, seed);
  std::vector<FusionExample> subset;
  for (std::size_t i : sample.indices) subset.push_back(data.train_pool[i]);

  RunOutcome outcome;
  TrainConfig tc = config.train;
  tc.seed = seed;
  if (partition.trainable.empty()) {
    // Nothing to train: one record with the training-set loss.
    const auto features = system.precompute_features(subset);
    double loss = 0.0;
    for (std::size_t i = 0; i < subset.size(); ++i) {
      ad::Graph<float> g;
      Binding<float> b(g, system.stores());
      loss += system.loss(b, subset[i], &features[i]).value()[0];
    }
    const auto eval_features = system.precompute_features(data.eval);
    outcome.final_eval = evaluate(system, data.eval, &eval_features);
    outcome.records.push_back(
        make_record(config, method, seed, system, 0, loss / static_cast<double>(subset.size()), outcome.final_eval));
  } else {
    const TrainResult result = train(system, subset, partition, tc, data.eval);
    if (result.frozen_hash_after != result.frozen_hash_before) {
      fail(ErrorCategory::kGraphState, "frozen parameters changed during training");
    }
    if (tc.evaluate_each_epoch && !result.epochs.empty()) {
      outcome.final_eval = result.epochs.back().eval;
    } else {
      const bool frozen_encoders = method != FusionMethod::kFinetune;
      FeatureCache features;
      if (frozen_encoders) features = system.precompute_features(data.eval);
      outcome.final_eval = evaluate(system, data.eval, frozen_encoders ? &features : nullptr);
    }
    for (const auto& em : result.epochs) {
      outcome.records.push_back(make_record(config, method, seed, system, em.epoch, em.loss,
                                            tc.evaluate_each_epoch ? em.eval : outcome.final_eval));
    }
  }
  outcome.fusion_params = ParameterStore();
  const auto names = fusion_names(system, method);
  outcome.fusion_params = collect_checkpoint(system.stores(), names, 0).params;
  outcome.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return outcome;
}

FusionSystem restore_run(const ExperimentConfig& config, const PretrainedComponents& components,
                         FusionMethod method, std::uint64_t seed, const std::filesystem::path& checkpoint) {
  FusionSystem system(components.plm, components.vision, components.audio, fusion_spec_for(config, method), seed);
  const Checkpoint ck = load_checkpoint(checkpoint, fusion_fingerprint(config, method));
  for (const auto& [name, value] : ck.params) {
    bool placed = false;
    for (ParameterStore* s : system.mutable_stores()) {
      if (!s->contains(name)) continue;
      if (s->at(name).shape() != value.shape()) {
        fail(ErrorCategory::kShapeMismatch, "checkpoint tensor '" + name + "' has the wrong shape");
      }
      s->at(name) = value;
      placed = true;
    }
    if (!placed) fail(ErrorCategory::kInvalidArgument, "checkpoint tensor '" + name + "' is not part of the system");
  }
  return system;
}

namespace {

void write_timing(const std::vector<std::pair<std::string, double>>& wall_clock, const std::filesystem::path& path) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [id, s] : wall_clock) j[id] = s;
  io::write_file(path.string(), j.dump(2) + "\n");
}

void run_grid(const ExperimentConfig& config, const PretrainedComponents& components, const TaskData& data,
              const std::filesystem::path& out, ExperimentOutput& result) {
  ensure_directory(out / "checkpoints");
  for (FusionMethod method : config.methods) {
    for (std::uint64_t seed : config.seeds) {
      auto outcome = run_single(config, components, data, method, seed);
      const std::string id = run_id(config, method, seed);
      save_checkpoint(out / "checkpoints" / (id + ".pfck"),
                      Checkpoint{fusion_fingerprint(config, method), std::move(outcome.fusion_params)});
      result.records.insert(result.records.end(), outcome.records.begin(), outcome.records.end());
      result.wall_clock.emplace_back(id, outcome.wall_clock_seconds);
    }
  }
}

}  // namespace

ExperimentOutput run_experiment(const ExperimentConfig& config, const std::filesystem::path& out) {
  return run_experiment(config, load_pretrained(config), out);
}

ExperimentOutput run_experiment(const ExperimentConfig& config, const PretrainedComponents& components,
                                const std::filesystem::path& out) {
  ensure_directory(out);
  const TaskData data = build_task_data(config);
  ExperimentOutput result;
  run_grid(config, components, data, out, result);
  emit_metrics(result.records, out / "metrics.jsonl", out / "summary.txt");
  write_timing(result.wall_clock, out / "timing.json");
  return result;
}

ExperimentOutput run_prompt_length_sweep(const ExperimentConfig& config, const std::filesystem::path& out) {
  return run_prompt_length_sweep(config, load_pretrained(config), out);
}

ExperimentOutput run_prompt_length_sweep(const ExperimentConfig& config, const PretrainedComponents& components,
                                         const std::filesystem::path& out) {
  if (config.sweep_prompt_lengths.empty()) fail(ErrorCategory::kConfig, "the sweep needs prompt lengths");
  for (FusionMethod m : config.methods) {
    if (!uses_prompts(m)) {
      fail(ErrorCategory::kConfig, std::string("method ") + method_name(m) + " has no prompt length to sweep");
    }
  }
  ensure_directory(out);
  const TaskData data = build_task_data(config);
  ExperimentOutput result;
  for (int n : config.sweep_prompt_lengths) {
    ExperimentConfig c = config;
    c.prompt.length = n;
    run_grid(c, components, data, out, result);
  }
  emit_metrics(result.records, out / "metrics.jsonl", out / "summary.txt");
  const std::string score = config.task == TaskKind::kVqa2Mod ? "Overall" : "F-Score";
  io::write_file((out / "grid.txt").string(), sweep_grid(result.records, score));
  write_timing(result.wall_clock, out / "timing.json");
  return result;
}

}  // namespace promptfuse
