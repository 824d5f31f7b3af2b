// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptfuse/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "promptfuse/checkpoint.hpp"

namespace promptfuse {

FusionExample to_fusion_example(const QASample& sample, const Vocab& vocab) {
  FusionExample ex;
  ex.modalities.push_back({"vision", {sample.scene.image.as_row<float>()}});
  for (const auto& w : sample.question) ex.text.push_back(vocab.id(w));
  for (const auto& w : sample.answer) ex.answer.push_back(vocab.id(w));
  ex.kind = question_type_name(sample.type);
  ex.answer_text = sample.answer.front();
  return ex;
}

FusionExample to_fusion_example(const TrimodalSample& sample, const Vocab& vocab) {
  FusionExample ex;
  ex.modalities.push_back({"video", frames_as_rows(sample.frames)});
  ex.modalities.push_back({"audio", windows_as_rows(sample.audio_windows)});
  for (const auto& w : sample.utterance) ex.text.push_back(vocab.id(w));
  ex.answer = {vocab.id(sample.verbalized)};
  ex.kind = "Trimodal";
  ex.answer_text = sample.verbalized;
  return ex;
}

// ---------------------------------------------------------------------------
// FusionSystem

FusionSystem::FusionSystem(EncoderDecoderModel plm, std::optional<VisionEncoder> vision,
                           std::optional<AudioEncoder> audio, const FusionSpec& spec,
                           std::uint64_t seed)
    : plm_(std::move(plm)), vision_(std::move(vision)), audio_(std::move(audio)), spec_(spec) {
  const auto d = static_cast<std::size_t>(plm_.config().d_model);
  if (spec_.slots.empty()) fail(ErrorCategory::kConfig, "fusion needs at least one modality slot");
  for (const auto& slot : spec_.slots) {
    const ModalityEncoder& enc = encoder_for(slot);
    if (enc.width() != d) {
      fail(ErrorCategory::kConfig, "encoder '" + enc.name() + "' emits width " +
                                       std::to_string(enc.width()) + " but the language model width is " +
                                       std::to_string(d));
    }
  }
  if (spec_.method == FusionMethod::kNoPrompt) spec_.bank.length = 0;
  if (uses_prompts(spec_.method)) {
    PromptBank(spec_.bank, d, seed).register_parameters(fusion_);
  } else {
    register_baseline_parameters(fusion_, spec_.method, d, d, spec_.slots.size());
  }
}

const ModalityEncoder& FusionSystem::encoder_for(const ModalitySlot& slot) const {
  if (slot.encoder == ModalitySlot::Encoder::kVision) {
    if (!vision_) fail(ErrorCategory::kConfig, "slot '" + slot.name + "' needs a vision encoder");
    return *vision_;
  }
  if (!audio_) fail(ErrorCategory::kConfig, "slot '" + slot.name + "' needs an audio encoder");
  return *audio_;
}

std::vector<const ParameterStore*> FusionSystem::stores() const {
  std::vector<const ParameterStore*> out{&plm_.params()};
  if (vision_) out.push_back(&vision_->params());
  if (audio_) out.push_back(&audio_->params());
  out.push_back(&fusion_);
  return out;
}

std::vector<ParameterStore*> FusionSystem::mutable_stores() {
  std::vector<ParameterStore*> out{&plm_.params()};
  if (vision_) out.push_back(&vision_->params());
  if (audio_) out.push_back(&audio_->params());
  out.push_back(&fusion_);
  return out;
}

std::set<std::string> FusionSystem::parameter_names() const {
  std::set<std::string> out;
  for (const ParameterStore* s : stores())
    for (const auto& [name, _] : *s) out.insert(name);
  return out;
}

std::vector<Tensor<float>> FusionSystem::raw_samples(const FusionExample& ex, std::size_t k) const {
  const ModalitySlot& slot = spec_.slots.at(k);
  for (const auto& m : ex.modalities) {
    if (m.slot != slot.name) continue;
    if (m.samples.empty()) fail(ErrorCategory::kInvalidArgument, "slot '" + slot.name + "' has no samples");
    if (spec_.method == FusionMethod::kBlackImage && slot.visual()) {
      std::vector<Tensor<float>> black;
      for (const auto& s : m.samples) black.emplace_back(s.rows(), s.cols());
      return black;
    }
    return m.samples;
  }
  fail(ErrorCategory::kInvalidArgument, "example has no input for slot '" + slot.name + "'");
}

template <typename T>
ad::Var<T> FusionSystem::encode_slot(Binding<T>& b, std::size_t k, std::span<const ad::Var<T>> raw) const {
  const ModalityEncoder& enc = encoder_for(spec_.slots.at(k));
  if (raw.size() > 1 && spec_.pooling == PoolingMode::kFullSequence) {
    fail(ErrorCategory::kInvalidArgument, "full-sequence pooling takes a single sample per slot");
  }
  std::vector<ad::Var<T>> pooled;
  for (const auto& r : raw) pooled.push_back(pool_sequence(enc.forward(b, r), spec_.pooling));
  if (pooled.size() == 1) return pooled.front();
  return ad::mean_rows(ad::concat_rows<T>(pooled));
}

FeatureCache FusionSystem::precompute_features(std::span<const FusionExample> examples) const {
  FeatureCache cache;
  cache.reserve(examples.size());
  for (const auto& ex : examples) {
    std::vector<Tensor<float>> per_slot;
    for (std::size_t k = 0; k < spec_.slots.size(); ++k) {
      ad::Graph<float> g;
      Binding<float> b(g, stores());
      std::vector<ad::Var<float>> raws;
      for (const auto& r : raw_samples(ex, k)) raws.push_back(g.constant(r));
      per_slot.push_back(encode_slot<float>(b, k, raws).value());
    }
    cache.push_back(std::move(per_slot));
  }
  return cache;
}

template <typename T>
SystemInputs<T> FusionSystem::embed(Binding<T>& b, const FusionExample& ex,
                                    const std::vector<Tensor<float>>* features) const {
  SystemInputs<T> out;
  for (std::size_t k = 0; k < spec_.slots.size(); ++k) {
    if (features) {
      out.modality.push_back(b.graph().constant(features->at(k).template cast<T>()));
    } else {
      std::vector<ad::Var<T>> raws;
      for (const auto& r : raw_samples(ex, k)) raws.push_back(b.graph().constant(r.template cast<T>()));
      out.modality.push_back(encode_slot<T>(b, k, raws));
    }
  }
  out.text = plm_.embed_tokens(b, ex.text);
  return out;
}

template <typename T>
ad::Var<T> FusionSystem::encoder_states(Binding<T>& b, SystemInputs<T> inputs, FusedLayout* layout,
                                        std::vector<Tensor<T>>* trace) const {
  auto base = apply_baseline_transform(b, spec_.method, std::move(inputs.modality), inputs.text);
  std::optional<ad::Var<T>> prompts;
  if (uses_prompts(spec_.method) && spec_.bank.length > 0) prompts = apply_prompt_encoder(b, spec_.bank);
  const auto& cfg = plm_.config();
  auto fused = assemble_fused_input<T>(prompts, base.modality, base.text, spec_.bank.position,
                                       static_cast<std::size_t>(cfg.d_model),
                                       static_cast<std::size_t>(cfg.max_len));
  const std::size_t length = fused.embeddings.rows();
  if (layout) {
    *layout = FusedLayout{fused.prompt_indices, fused.modality_indices, fused.text_indices, length};
  }
  if (spec_.method == FusionMethod::kBlindPrompt) {
    const AttentionMaskSpec mask = build_attention_mask(length, fused.prompt_indices, spec_.method);
    return plm_.encode(b, fused.embeddings, &mask, 0, trace);
  }
  return plm_.encode(b, fused.embeddings, nullptr, 0, trace);
}

template <typename T>
ad::Var<T> FusionSystem::loss(Binding<T>& b, const FusionExample& ex,
                              const std::vector<Tensor<float>>* features) const {
  auto states = encoder_states(b, embed(b, ex, features));
  auto logits = plm_.decoder_logits(b, states, EncoderDecoderModel::decoder_input_for(ex.answer));
  return sequence_cross_entropy(logits, EncoderDecoderModel::decoder_target_for(ex.answer));
}

std::vector<int> FusionSystem::predict(const FusionExample& ex,
                                       const std::vector<Tensor<float>>* features) const {
  ad::Graph<float> g;
  Binding<float> b(g, stores());
  auto states = encoder_states(b, embed(b, ex, features));
  return plm_.decode_greedy(states.value(), plm_.config().max_decoder_len);
}

#define PROMPTFUSE_INSTANTIATE(T)                                                                  \
  template ad::Var<T> FusionSystem::encode_slot(Binding<T>&, std::size_t,                          \
                                                std::span<const ad::Var<T>>) const;                \
  template SystemInputs<T> FusionSystem::embed(Binding<T>&, const FusionExample&,                  \
                                               const std::vector<Tensor<float>>*) const;           \
  template ad::Var<T> FusionSystem::encoder_states(Binding<T>&, SystemInputs<T>, FusedLayout*,     \
                                                   std::vector<Tensor<T>>*) const;                 \
  template ad::Var<T> FusionSystem::loss(Binding<T>&, const FusionExample&,                        \
                                         const std::vector<Tensor<float>>*) const;
PROMPTFUSE_INSTANTIATE(float)
PROMPTFUSE_INSTANTIATE(double)
#undef PROMPTFUSE_INSTANTIATE

// ---------------------------------------------------------------------------
// Partition, sampling, evaluation

namespace {

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

std::vector<std::string> trainable_prefixes(FusionMethod method) {
  switch (method) {
    case FusionMethod::kPromptFuse:
    case FusionMethod::kBlindPrompt:
    case FusionMethod::kBlackImage: return {"prompt."};
    case FusionMethod::kLinear: return {"linear."};
    case FusionMethod::kJointProj: return {"joint."};
    case FusionMethod::kFinetune: return {"vision.", "audio."};
    case FusionMethod::kNoPrompt: return {};
  }
  return {};
}

}  // namespace

ParameterPartition partition_parameters(const FusionSystem& system, FusionMethod method) {
  static const std::vector<std::string> kKnown = {"plm.",   "vision.", "audio.",
                                                  "prompt.", "linear.", "joint."};
  ParameterPartition p;
  const auto prefixes = trainable_prefixes(method);
  for (const auto& name : system.parameter_names()) {
    if (std::none_of(kKnown.begin(), kKnown.end(), [&](const auto& k) { return starts_with(name, k); })) {
      fail(ErrorCategory::kInvalidArgument, "parameter '" + name + "' has no recognized component name");
    }
    const bool trainable =
        std::any_of(prefixes.begin(), prefixes.end(), [&](const auto& k) { return starts_with(name, k); });
    (trainable ? p.trainable : p.frozen).insert(name);
  }
  return p;
}

FewShotSample sample_few_shot(std::span<const FusionExample> dataset, std::size_t k, std::uint64_t seed) {
  if (k > dataset.size()) {
    fail(ErrorCategory::kInvalidArgument, "cannot sample " + std::to_string(k) + " shots from " +
                                              std::to_string(dataset.size()) + " examples");
  }
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(k);
  FewShotSample out;
  out.indices = std::move(order);
  for (std::size_t i : out.indices) out.histogram.add(dataset[i].kind, dataset[i].answer_text);
  return out;
}

EvalMetrics evaluate(const FusionSystem& system, std::span<const FusionExample> examples,
                     const FeatureCache* features, const std::string& positive_answer) {
  EvalMetrics m;
  m.count = examples.size();
  if (examples.empty()) return m;
  std::optional<std::vector<int>> positive_ids;
  for (const auto& ex : examples)
    if (ex.answer_text == positive_answer) positive_ids = ex.answer;

  std::map<std::string, std::pair<std::size_t, std::size_t>> by_kind;
  std::size_t hits = 0, tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    const auto pred = system.predict(ex, features ? &features->at(i) : nullptr);
    const bool hit = pred == ex.answer;
    hits += hit;
    auto& [kh, kt] = by_kind[ex.kind];
    kh += hit;
    ++kt;
    if (positive_ids) {
      const bool pred_pos = pred == *positive_ids;
      const bool true_pos = ex.answer_text == positive_answer;
      tp += pred_pos && true_pos;
      fp += pred_pos && !true_pos;
      fn += !pred_pos && true_pos;
    }
  }
  m.accuracy = static_cast<double>(hits) / static_cast<double>(examples.size());
  for (const auto& [kind, ht] : by_kind) {
    m.accuracy_by_kind[kind] = static_cast<double>(ht.first) / static_cast<double>(ht.second);
  }
  if (positive_ids) {
    const double p = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double r = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    m.precision = p;
    m.recall = r;
    m.f1 = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Training loop

TrainResult train(FusionSystem& system, std::span<const FusionExample> dataset,
                  const ParameterPartition& partition, const TrainConfig& config,
                  std::span<const FusionExample> eval) {
  const auto names = system.parameter_names();
  for (const auto& n : partition.trainable) {
    if (!names.count(n)) fail(ErrorCategory::kInvalidArgument, "trainable parameter '" + n + "' does not exist");
    if (partition.frozen.count(n)) {
      fail(ErrorCategory::kInvalidArgument, "parameter '" + n + "' is both trainable and frozen");
    }
  }
  if (partition.trainable.size() + partition.frozen.size() != names.size()) {
    fail(ErrorCategory::kInvalidArgument, "partition does not cover every parameter");
  }
  if (config.batch_size <= 0 || config.gradient_accumulation <= 0) {
    fail(ErrorCategory::kConfig, "batch size and gradient accumulation must be positive");
  }
  if (config.prompt_learning_rate <= 0 || config.learning_rate <= 0) {
    fail(ErrorCategory::kConfig, "learning rates must be positive");
  }

  TrainResult result;
  result.frozen_hash_before = hash_parameters(system.stores(), partition.frozen);

  const bool encoders_frozen = std::none_of(partition.trainable.begin(), partition.trainable.end(),
                                            [](const std::string& n) {
                                              return starts_with(n, "vision.") || starts_with(n, "audio.");
                                            });
  FeatureCache train_features, eval_features;
  if (encoders_frozen && config.epochs > 0) {
    train_features = system.precompute_features(dataset);
    if (config.evaluate_each_epoch && !eval.empty()) eval_features = system.precompute_features(eval);
  }

  AdamState adam(partition.trainable, [&](const std::string& name) {
    if (config.learning_rate_override) return *config.learning_rate_override;
    return name == PromptBank::kBankName ? config.prompt_learning_rate : config.learning_rate;
  });

  auto dump_last_good = [&] {
    if (!config.last_good_checkpoint) return;
    std::vector<std::string> keep(partition.trainable.begin(), partition.trainable.end());
    save_checkpoint(*config.last_good_checkpoint,
                    collect_checkpoint(system.stores(), keep, system.plm().config().fingerprint()));
  };

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(config.seed);
  const auto batch = static_cast<std::size_t>(config.batch_size);
  const auto accum = static_cast<std::size_t>(config.gradient_accumulation);
  bool stop = false;

  for (int epoch = 0; epoch < config.epochs && !stop; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size() && !stop; start += batch * accum) {
      std::map<std::string, Tensor<float>> grads;
      for (const auto& n : partition.trainable) {
        for (const ParameterStore* s : system.stores())
          if (s->contains(n)) grads.emplace(n, Tensor<float>(s->at(n).rows(), s->at(n).cols()));
      }
      double step_loss = 0.0;
      std::size_t micro = 0;
      for (std::size_t mb = start; mb < std::min(order.size(), start + batch * accum); mb += batch) {
        const std::size_t end = std::min(order.size(), mb + batch);
        ad::Graph<float> g;
        Binding<float> b(g, system.stores(),
                         [&](const std::string& n) { return partition.trainable.count(n) != 0; });
        std::vector<ad::Var<float>> losses;
        for (std::size_t i = mb; i < end; ++i) {
          const std::size_t idx = order[i];
          losses.push_back(system.loss(b, dataset[idx], encoders_frozen ? &train_features[idx] : nullptr));
        }
        auto loss = ad::scale(ad::sum(ad::concat_rows<float>(losses)), 1.0f / static_cast<float>(losses.size()));
        const double value = loss.value()[0];
        if (!std::isfinite(value)) {
          dump_last_good();
          fail(ErrorCategory::kNumerical, "non-finite training loss at epoch " + std::to_string(epoch) +
                                              " step " + std::to_string(result.steps));
        }
        if (!partition.trainable.empty()) {
          g.backward(loss);
          for (auto& [name, grad] : b.gradients()) {
            auto& acc = grads.at(name);
            for (std::size_t i = 0; i < grad.size(); ++i) acc[i] += grad[i];
          }
        }
        step_loss += value;
        ++micro;
      }
      if (micro > 1) {
        for (auto& [_, grad] : grads)
          for (auto& v : grad.values()) v /= static_cast<float>(micro);
      }
      if (!partition.trainable.empty()) {
        try {
          adam.step(system.mutable_stores(), grads);
        } catch (const Error& e) {
          if (e.category() == ErrorCategory::kNumerical) dump_last_good();
          throw;
        }
      }
      step_loss /= static_cast<double>(micro);
      result.step_losses.push_back(step_loss);
      epoch_loss += step_loss;
      ++epoch_steps;
      ++result.steps;
      if (config.max_steps && result.steps >= config.max_steps) stop = true;
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.loss = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
    if (config.evaluate_each_epoch) {
      if (!eval.empty()) {
        em.eval = evaluate(system, eval, encoders_frozen ? &eval_features : nullptr);
      } else {
        em.eval = evaluate(system, dataset, encoders_frozen ? &train_features : nullptr);
      }
    }
    result.epochs.push_back(std::move(em));
  }

  result.frozen_hash_after = hash_parameters(system.stores(), partition.frozen);
  if (result.frozen_hash_after != result.frozen_hash_before) {
    fail(ErrorCategory::kGraphState, "a frozen parameter changed during training");
  }
  return result;
}

}  // namespace promptfuse
