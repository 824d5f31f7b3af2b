// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptfuse/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "promptfuse/layers.hpp"
#include "promptfuse/optim.hpp"

namespace promptfuse {

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab(const std::vector<std::string>& content_tokens) {
  tokens_ = {"<pad>", "<s>", "</s>", "<mask>"};
  for (const auto& t : content_tokens) tokens_.push_back(t);
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
      fail(ErrorCategory::kInvalidArgument, "duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

bool Vocab::contains(std::string_view token) const {
  return ids_.count(std::string(token)) != 0;
}

int Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) {
    fail(ErrorCategory::kInvalidArgument, "unknown token '" + std::string(token) + "'");
  }
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    fail(ErrorCategory::kInvalidArgument, "token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocab::encode(std::string_view sentence) const {
  std::vector<int> out;
  std::istringstream in{std::string(sentence)};
  std::string word;
  while (in >> word) out.push_back(id(word));
  return out;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) fail(ErrorCategory::kConfig, msg);
  };
  need(d_model > 0 && heads > 0, "d_model and heads must be positive");
  need(d_model % heads == 0, "d_model must be divisible by the head count");
  need(encoder_layers >= 0 && decoder_layers >= 1, "layer counts out of range");
  need(ffn > 0 && max_len > 0 && max_decoder_len > 1, "ffn/max_len/max_decoder_len must be positive");
  need(vocab_size > 4, "vocab_size must exceed the reserved ids");
}

std::uint64_t ModelConfig::fingerprint() const {
  const std::int64_t fields[] = {d_model, heads, encoder_layers, decoder_layers,
                                 ffn,     max_len, max_decoder_len, vocab_size};
  return fnv1a(std::as_bytes(std::span<const std::int64_t>(fields)));
}

// ---------------------------------------------------------------------------
// Decoding and loss

std::vector<int> greedy_decode(const StepLogits& step, int max_steps) {
  std::vector<int> prefix{Vocab::kBos};
  std::vector<int> out;
  for (int s = 0; s < max_steps; ++s) {
    const std::vector<float> logits = step(prefix);
    int best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
      if (logits[i] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    if (best == Vocab::kEos) break;
    out.push_back(best);
    prefix.push_back(best);
  }
  return out;
}

template <typename T>
ad::Var<T> sequence_cross_entropy(const ad::Var<T>& logits, std::span<const int> targets) {
  return ad::cross_entropy(logits, targets, Vocab::kPad);
}

template ad::Var<float> sequence_cross_entropy(const ad::Var<float>&, std::span<const int>);
template ad::Var<double> sequence_cross_entropy(const ad::Var<double>&, std::span<const int>);

// ---------------------------------------------------------------------------
// Model

EncoderDecoderModel::EncoderDecoderModel(const ModelConfig& config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto f = static_cast<std::size_t>(config_.ffn);
  params_.add("plm.tok_emb", normal_tensor(static_cast<std::size_t>(config_.vocab_size), d, 0.02f, rng));
  params_.add("plm.enc_pos", normal_tensor(static_cast<std::size_t>(config_.max_len), d, 0.02f, rng));
  params_.add("plm.dec_pos",
              normal_tensor(static_cast<std::size_t>(config_.max_decoder_len), d, 0.02f, rng));
  for (int l = 0; l < config_.encoder_layers; ++l) {
    layers::add_encoder_layer(params_, "plm.enc." + std::to_string(l), d, f, rng);
  }
  layers::add_layer_norm(params_, "plm.enc.ln_f", d);
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const std::string p = "plm.dec." + std::to_string(l);
    layers::add_layer_norm(params_, p + ".ln1", d);
    layers::add_linear(params_, p + ".attn.qkv", d, 3 * d, rng);
    layers::add_linear(params_, p + ".attn.out", d, d, rng);
    layers::add_layer_norm(params_, p + ".ln_cross", d);
    layers::add_linear(params_, p + ".cross.q", d, d, rng);
    layers::add_linear(params_, p + ".cross.kv", d, 2 * d, rng);
    layers::add_linear(params_, p + ".cross.out", d, d, rng);
    layers::add_layer_norm(params_, p + ".ln2", d);
    layers::add_linear(params_, p + ".ffn.in", d, f, rng);
    layers::add_linear(params_, p + ".ffn.out", f, d, rng);
  }
  layers::add_layer_norm(params_, "plm.dec.ln_f", d);
  params_.add("plm.out_bias", Tensor<float>(1, static_cast<std::size_t>(config_.vocab_size)));
}

EncoderDecoderModel::EncoderDecoderModel(const ModelConfig& config, ParameterStore params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  EncoderDecoderModel reference(config, 0);
  for (const auto& [name, t] : reference.params()) {
    if (!params_.contains(name) || params_.at(name).shape() != t.shape()) {
      fail(ErrorCategory::kFingerprintMismatch,
           "parameter '" + name + "' missing or mis-shaped for the model config");
    }
  }
  if (params_.size() != reference.params().size()) {
    fail(ErrorCategory::kFingerprintMismatch, "unexpected extra language-model parameters");
  }
}

template <typename T>
ad::Var<T> EncoderDecoderModel::embed_tokens(Binding<T>& b, std::span<const int> ids) const {
  return ad::embedding(b("plm.tok_emb"), ids);
}

template <typename T>
ad::Var<T> EncoderDecoderModel::embed_example(Binding<T>& b, const TextExample& example) const {
  if (example.summary.empty()) return embed_tokens(b, example.input);
  auto summary = ad::scale(ad::mean_rows(embed_tokens(b, example.summary)),
                           static_cast<T>(example.summary.size()));
  if (example.input.empty()) return summary;
  return ad::concat_rows({summary, embed_tokens(b, example.input)});
}

template <typename T>
ad::Var<T> EncoderDecoderModel::encode(Binding<T>& b, const ad::Var<T>& input_embeddings,
                                       const AttentionMaskSpec* mask,
                                       std::size_t position_offset,
                                       std::vector<Tensor<T>>* trace) const {
  const std::size_t len = input_embeddings.rows();
  if (len + position_offset > static_cast<std::size_t>(config_.max_len)) {
    fail(ErrorCategory::kInvalidArgument,
         "encoder input length " + std::to_string(len + position_offset) + " exceeds max length " +
             std::to_string(config_.max_len));
  }
  if (input_embeddings.cols() != static_cast<std::size_t>(config_.d_model)) {
    fail(ErrorCategory::kShapeMismatch, "encoder input width does not match d_model");
  }
  Tensor<T> mask_values;
  if (mask) {
    if (mask->length != len) {
      fail(ErrorCategory::kShapeMismatch,
           "attention mask side " + std::to_string(mask->length) + " vs sequence length " +
               std::to_string(len));
    }
    mask_values = mask->as<T>();
  }
  auto pos = ad::slice_rows(b("plm.enc_pos"), position_offset, len);
  auto x = ad::add(input_embeddings, pos);
  for (int l = 0; l < config_.encoder_layers; ++l) {
    x = layers::encoder_layer(b, "plm.enc." + std::to_string(l), x, config_.heads,
                              mask ? &mask_values : nullptr, trace);
  }
  return layers::layer_norm(b, "plm.enc.ln_f", x);
}

template <typename T>
ad::Var<T> EncoderDecoderModel::decoder_logits(Binding<T>& b, const ad::Var<T>& encoder_states,
                                               std::span<const int> decoder_input) const {
  const std::size_t steps = decoder_input.size();
  if (steps == 0 || steps > static_cast<std::size_t>(config_.max_decoder_len)) {
    fail(ErrorCategory::kInvalidArgument, "decoder input length out of range");
  }
  const std::size_t d = static_cast<std::size_t>(config_.d_model);
  Tensor<T> causal(steps, steps);
  for (std::size_t i = 0; i < steps; ++i)
    for (std::size_t j = i + 1; j < steps; ++j) causal(i, j) = ad::kMaskedLogit<T>;

  auto x = ad::add(embed_tokens(b, decoder_input), ad::slice_rows(b("plm.dec_pos"), 0, steps));
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const std::string p = "plm.dec." + std::to_string(l);
    x = layers::self_attention_block(b, p, x, config_.heads, &causal);
    auto h = layers::layer_norm(b, p + ".ln_cross", x);
    auto q = layers::linear(b, p + ".cross.q", h);
    auto kv = layers::linear(b, p + ".cross.kv", encoder_states);
    auto att = layers::multi_head_attention(q, ad::slice_cols(kv, 0, d), ad::slice_cols(kv, d, d),
                                            config_.heads, static_cast<const Tensor<T>*>(nullptr));
    x = ad::add(x, layers::linear(b, p + ".cross.out", att));
    x = layers::feed_forward_block(b, p, "ln2", x);
  }
  x = layers::layer_norm(b, "plm.dec.ln_f", x);
  return ad::add_row(ad::matmul_nt(x, b("plm.tok_emb")), b("plm.out_bias"));
}

Tensor<float> EncoderDecoderModel::encode(const Tensor<float>& input_embeddings,
                                          const AttentionMaskSpec* mask) const {
  ad::Graph<float> g;
  Binding<float> b(g, {&params_});
  return encode(b, g.constant(input_embeddings), mask).value();
}

std::vector<int> EncoderDecoderModel::decode_greedy(const Tensor<float>& encoder_states,
                                                    int max_steps) const {
  const int limit = std::min(max_steps, config_.max_decoder_len);
  auto step = [&](std::span<const int> prefix) {
    ad::Graph<float> g;
    Binding<float> b(g, {&params_});
    auto logits = decoder_logits(b, g.constant(encoder_states), prefix);
    auto last = logits.value().row(logits.rows() - 1);
    return std::vector<float>(last.begin(), last.end());
  };
  return greedy_decode(step, limit);
}

std::vector<int> EncoderDecoderModel::decoder_input_for(std::span<const int> answer) {
  std::vector<int> out{Vocab::kBos};
  out.insert(out.end(), answer.begin(), answer.end());
  return out;
}

std::vector<int> EncoderDecoderModel::decoder_target_for(std::span<const int> answer) {
  std::vector<int> out(answer.begin(), answer.end());
  out.push_back(Vocab::kEos);
  return out;
}

template ad::Var<float> EncoderDecoderModel::embed_tokens(Binding<float>&, std::span<const int>) const;
template ad::Var<double> EncoderDecoderModel::embed_tokens(Binding<double>&, std::span<const int>) const;
template ad::Var<float> EncoderDecoderModel::embed_example(Binding<float>&, const TextExample&) const;
template ad::Var<double> EncoderDecoderModel::embed_example(Binding<double>&, const TextExample&) const;
template ad::Var<float> EncoderDecoderModel::encode(Binding<float>&, const ad::Var<float>&,
                                                    const AttentionMaskSpec*, std::size_t,
                                                    std::vector<Tensor<float>>*) const;
template ad::Var<double> EncoderDecoderModel::encode(Binding<double>&, const ad::Var<double>&,
                                                     const AttentionMaskSpec*, std::size_t,
                                                     std::vector<Tensor<double>>*) const;
template ad::Var<float> EncoderDecoderModel::decoder_logits(Binding<float>&, const ad::Var<float>&,
                                                            std::span<const int>) const;
template ad::Var<double> EncoderDecoderModel::decoder_logits(Binding<double>&,
                                                             const ad::Var<double>&,
                                                             std::span<const int>) const;

// ---------------------------------------------------------------------------
// Pretraining

std::vector<int> predict(const EncoderDecoderModel& model, const TextExample& example) {
  ad::Graph<float> g;
  Binding<float> b(g, {&model.params()});
  auto states = model.encode(b, model.embed_example(b, example), nullptr);
  return model.decode_greedy(states.value(), model.config().max_decoder_len);
}

double exact_match(const EncoderDecoderModel& model, std::span<const TextExample> examples) {
  if (examples.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& ex : examples) {
    if (predict(model, ex) == ex.answer) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(examples.size());
}

PretrainResult pretrain_language_model(std::span<const TextExample> train,
                                       std::span<const TextExample> heldout,
                                       const ModelConfig& config, const PretrainConfig& tc,
                                       const EpochCallback& on_epoch) {
  EncoderDecoderModel model(config, tc.seed);
  PretrainMetrics metrics;
  std::set<std::string> names;
  for (const auto& n : model.params().names()) names.insert(n);
  AdamState adam(names, [&](const std::string&) { return tc.learning_rate; });
  std::mt19937_64 rng(tc.seed ^ 0x9e3779b97f4a7c15ULL);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = static_cast<std::size_t>(std::max(1, tc.batch_size));
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      ad::Graph<float> g;
      Binding<float> b(g, {&model.params()}, [](const std::string&) { return true; });
      std::vector<ad::Var<float>> losses;
      for (std::size_t i = start; i < end; ++i) {
        const TextExample& ex = train[order[i]];
        std::size_t offset = 0;
        const std::size_t length = ex.input.size() + (ex.summary.empty() ? 0 : 1);
        if (length > static_cast<std::size_t>(config.max_len)) {
          fail(ErrorCategory::kInvalidArgument, "pretraining example longer than max length");
        }
        const std::size_t room = static_cast<std::size_t>(config.max_len) - length;
        if (tc.position_jitter && room > 0) {
          offset = std::uniform_int_distribution<std::size_t>(0, room)(rng);
        }
        auto states = model.encode(b, model.embed_example(b, ex), nullptr, offset);
        auto logits = model.decoder_logits(b, states, EncoderDecoderModel::decoder_input_for(ex.answer));
        losses.push_back(sequence_cross_entropy(logits, EncoderDecoderModel::decoder_target_for(ex.answer)));
      }
      auto total = ad::scale(ad::sum(ad::concat_rows<float>(losses)),
                             1.0f / static_cast<float>(losses.size()));
      const double loss = total.value()[0];
      if (!std::isfinite(loss)) {
        fail(ErrorCategory::kNumerical, "pretraining diverged at epoch " + std::to_string(epoch) +
                                            " batch " + std::to_string(batches) +
                                            " (loss " + std::to_string(loss) + ")");
      }
      g.backward(total);
      auto grads = b.gradients();
      std::map<std::string, Tensor<float>> named(grads.begin(), grads.end());
      adam.step({&model.params()}, named);
      epoch_loss += loss;
      ++batches;
    }
    metrics.epoch_loss.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
    if (on_epoch) on_epoch(epoch, metrics.epoch_loss.back());
  }

  metrics.heldout_exact_match = exact_match(model, heldout);
  std::map<std::string, std::pair<std::size_t, std::size_t>> by_kind;
  for (const auto& ex : heldout) {
    auto& [hit, total] = by_kind[ex.kind];
    ++total;
    if (predict(model, ex) == ex.answer) ++hit;
  }
  for (const auto& [kind, ht] : by_kind) {
    metrics.heldout_by_kind.emplace_back(
        kind, static_cast<double>(ht.first) / static_cast<double>(ht.second));
  }
  return PretrainResult{std::move(model), std::move(metrics)};
}

}  // namespace promptfuse
