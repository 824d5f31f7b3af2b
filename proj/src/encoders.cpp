// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptfuse/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "promptfuse/binary_io.hpp"
#include "promptfuse/layers.hpp"
#include "promptfuse/optim.hpp"

namespace promptfuse {

const char* pooling_name(PoolingMode mode) {
  switch (mode) {
    case PoolingMode::kCls: return "cls";
    case PoolingMode::kAverage: return "average";
    case PoolingMode::kFullSequence: return "sequence";
  }
  return "?";
}

PoolingMode parse_pooling(const std::string& name) {
  if (name == "cls") return PoolingMode::kCls;
  if (name == "average" || name == "avg") return PoolingMode::kAverage;
  if (name == "sequence" || name == "seq") return PoolingMode::kFullSequence;
  fail(ErrorCategory::kConfig, "unknown pooling mode '" + name + "'");
}

PooledEmbedding pool_sequence(const Tensor<float>& sequence, PoolingMode mode) {
  ad::Graph<float> g;
  return PooledEmbedding{mode, pool_sequence(g.constant(sequence), mode).value()};
}

void ModalityEncoder::check_input(const Shape& shape) const {
  if (shape != Shape{1, input_size()}) {
    fail(ErrorCategory::kShapeMismatch, name() + " encoder expects a 1x" +
                                            std::to_string(input_size()) + " raw sample, got " +
                                            to_string(shape));
  }
}

Tensor<float> ModalityEncoder::encode(const Tensor<float>& raw) const {
  check_input(raw.shape());
  ad::Graph<float> g;
  Binding<float> b(g, {&params()});
  return forward(b, g.constant(raw)).value();
}

// ---------------------------------------------------------------------------
// Vision

namespace {

std::vector<std::size_t> make_patch_index(const VisionEncoderConfig& c) {
  std::vector<std::size_t> idx;
  const int per_axis = c.image_size / c.patch;
  for (int pr = 0; pr < per_axis; ++pr)
    for (int pc = 0; pc < per_axis; ++pc)
      for (int dr = 0; dr < c.patch; ++dr)
        for (int dc = 0; dc < c.patch; ++dc)
          for (int ch = 0; ch < 3; ++ch) {
            const int r = pr * c.patch + dr, col = pc * c.patch + dc;
            idx.push_back(static_cast<std::size_t>((r * c.image_size + col) * 3 + ch));
          }
  return idx;
}

void check_store(const ParameterStore& reference, const ParameterStore& given, const std::string& what) {
  for (const auto& [name, t] : reference) {
    if (!given.contains(name) || given.at(name).shape() != t.shape()) {
      fail(ErrorCategory::kFingerprintMismatch,
           what + " parameter '" + name + "' missing or mis-shaped for the config");
    }
  }
  if (given.size() != reference.size()) {
    fail(ErrorCategory::kFingerprintMismatch, "unexpected extra " + what + " parameters");
  }
}

}  // namespace

VisionEncoder::VisionEncoder(const VisionEncoderConfig& config, std::uint64_t seed)
    : config_(config), patch_index_(make_patch_index(config)) {
  if (config.image_size % config.patch != 0 || config.width % config.heads != 0) {
    fail(ErrorCategory::kConfig, "invalid vision encoder config");
  }
  std::mt19937_64 rng(seed);
  const auto d = static_cast<std::size_t>(config.width);
  layers::add_linear(params_, "vision.patch", static_cast<std::size_t>(config.patch_features()), d,
                     rng, 0.2f);
  params_.add("vision.cls", normal_tensor(1, d, 0.02f, rng));
  params_.add("vision.pos", normal_tensor(sequence_length(), d, 0.02f, rng));
  for (int l = 0; l < config.layers; ++l) {
    layers::add_encoder_layer(params_, "vision.layer." + std::to_string(l), d,
                              static_cast<std::size_t>(config.ffn), rng);
  }
  layers::add_layer_norm(params_, "vision.ln_f", d);
}

VisionEncoder::VisionEncoder(const VisionEncoderConfig& config, ParameterStore params)
    : config_(config), params_(std::move(params)), patch_index_(make_patch_index(config)) {
  check_store(VisionEncoder(config, 0).params(), params_, "vision");
}

template <typename T>
ad::Var<T> VisionEncoder::forward_impl(Binding<T>& b, const ad::Var<T>& raw) const {
  check_input(raw.shape());
  const auto n = static_cast<std::size_t>(config_.patches());
  auto patches = ad::gather(raw, patch_index_, n, static_cast<std::size_t>(config_.patch_features()));
  auto tokens = layers::linear(b, "vision.patch", patches);
  auto x = ad::concat_rows({b("vision.cls"), tokens});
  x = ad::add(x, b("vision.pos"));
  for (int l = 0; l < config_.layers; ++l) {
    x = layers::encoder_layer(b, "vision.layer." + std::to_string(l), x, config_.heads,
                              static_cast<const Tensor<T>*>(nullptr));
  }
  return layers::layer_norm(b, "vision.ln_f", x);
}

ad::Var<float> VisionEncoder::forward(Binding<float>& b, const ad::Var<float>& raw) const {
  return forward_impl(b, raw);
}
ad::Var<double> VisionEncoder::forward(Binding<double>& b, const ad::Var<double>& raw) const {
  return forward_impl(b, raw);
}

Tensor<float> VisionEncoder::encode_image(const RawImage& image) const {
  if (image.height != static_cast<std::size_t>(config_.image_size) ||
      image.width != static_cast<std::size_t>(config_.image_size) ||
      image.pixels.size() != image.height * image.width * 3) {
    fail(ErrorCategory::kShapeMismatch,
         "image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
             ", encoder expects " + std::to_string(config_.image_size) + "x" +
             std::to_string(config_.image_size));
  }
  return encode(image.as_row<float>());
}

// ---------------------------------------------------------------------------
// Audio

namespace {

std::vector<std::size_t> frame_index(int length, int features, int kernel, int stride) {
  std::vector<std::size_t> idx;
  const int frames = (length - kernel) / stride + 1;
  for (int f = 0; f < frames; ++f)
    for (int k = 0; k < kernel; ++k)
      for (int c = 0; c < features; ++c)
        idx.push_back(static_cast<std::size_t>((f * stride + k) * features + c));
  return idx;
}

}  // namespace

AudioEncoder::AudioEncoder(const AudioEncoderConfig& config, std::uint64_t seed)
    : config_(config),
      frame_index1_(frame_index(config.window, 1, config.kernel1, config.stride1)),
      frame_index2_(frame_index(config.frames1(), config.channels1, config.kernel2, config.stride2)) {
  if (config.frames1() < config.kernel2 || config.frames2() < 1) {
    fail(ErrorCategory::kConfig, "invalid audio encoder config");
  }
  std::mt19937_64 rng(seed);
  layers::add_linear(params_, "audio.conv1", static_cast<std::size_t>(config.kernel1),
                     static_cast<std::size_t>(config.channels1), rng, 0.3f);
  layers::add_linear(params_, "audio.conv2",
                     static_cast<std::size_t>(config.kernel2 * config.channels1),
                     static_cast<std::size_t>(config.width), rng, 0.1f);
  layers::add_layer_norm(params_, "audio.ln_f", static_cast<std::size_t>(config.width));
}

AudioEncoder::AudioEncoder(const AudioEncoderConfig& config, ParameterStore params)
    : config_(config),
      params_(std::move(params)),
      frame_index1_(frame_index(config.window, 1, config.kernel1, config.stride1)),
      frame_index2_(frame_index(config.frames1(), config.channels1, config.kernel2, config.stride2)) {
  check_store(AudioEncoder(config, 0).params(), params_, "audio");
}

template <typename T>
ad::Var<T> AudioEncoder::forward_impl(Binding<T>& b, const ad::Var<T>& raw) const {
  check_input(raw.shape());
  const auto f1 = static_cast<std::size_t>(config_.frames1());
  const auto f2 = static_cast<std::size_t>(config_.frames2());
  auto x = ad::gather(raw, frame_index1_, f1, static_cast<std::size_t>(config_.kernel1));
  x = ad::gelu(layers::linear(b, "audio.conv1", x));
  x = ad::gather(x, frame_index2_, f2, static_cast<std::size_t>(config_.kernel2 * config_.channels1));
  x = ad::gelu(layers::linear(b, "audio.conv2", x));
  x = ad::concat_rows({ad::mean_rows(x), x});
  return layers::layer_norm(b, "audio.ln_f", x);
}

ad::Var<float> AudioEncoder::forward(Binding<float>& b, const ad::Var<float>& raw) const {
  return forward_impl(b, raw);
}
ad::Var<double> AudioEncoder::forward(Binding<double>& b, const ad::Var<double>& raw) const {
  return forward_impl(b, raw);
}

// ---------------------------------------------------------------------------
// Temporal averaging

Tensor<float> encode_temporal(std::span<const Tensor<float>> raw_samples, const ModalityEncoder& encoder) {
  ad::Graph<float> g;
  Binding<float> b(g, {&encoder.params()});
  std::vector<ad::Var<float>> raws;
  for (const auto& r : raw_samples) raws.push_back(g.constant(r));
  return encode_temporal<float>(b, raws, encoder).value();
}

template <typename T>
ad::Var<T> encode_temporal(Binding<T>& b, std::span<const ad::Var<T>> raw_samples,
                           const ModalityEncoder& encoder) {
  if (raw_samples.empty()) {
    fail(ErrorCategory::kInvalidArgument, "temporal encoding needs at least one frame or window");
  }
  std::vector<ad::Var<T>> summaries;
  for (const auto& raw : raw_samples) {
    summaries.push_back(ad::slice_rows(encoder.forward(b, raw), 0, 1));
  }
  return ad::mean_rows(ad::concat_rows<T>(summaries));
}

template ad::Var<float> encode_temporal(Binding<float>&, std::span<const ad::Var<float>>,
                                        const ModalityEncoder&);
template ad::Var<double> encode_temporal(Binding<double>&, std::span<const ad::Var<double>>,
                                         const ModalityEncoder&);

std::vector<Tensor<float>> frames_as_rows(const std::vector<RawImage>& frames) {
  std::vector<Tensor<float>> out;
  for (const auto& f : frames) out.push_back(f.as_row<float>());
  return out;
}

std::vector<Tensor<float>> windows_as_rows(const std::vector<std::vector<float>>& windows) {
  std::vector<Tensor<float>> out;
  for (const auto& w : windows) out.emplace_back(1, w.size(), w);
  return out;
}

// ---------------------------------------------------------------------------
// Pretraining

namespace {

constexpr int kIgnore = -1;

// One classification block: rows x classes logits sliced out of the head
// output, with one target per row.
struct HeadBlock {
  std::size_t offset;
  std::size_t rows;
  std::size_t classes;
};

struct LabeledInput {
  Tensor<float> raw;
  std::vector<std::vector<int>> targets;  // per block, kIgnore rows skipped
  std::vector<std::string> align_tokens;  // summed into the alignment target
};

template <typename Encoder>
EncoderPretrainMetrics run_classification_pretraining(Encoder& encoder,
                                                      const std::vector<LabeledInput>& train,
                                                      const std::vector<LabeledInput>& heldout,
                                                      const std::vector<HeadBlock>& blocks,
                                                      const EncoderPretrainConfig& config,
                                                      const AlignmentTargets* align) {
  const bool aligned = align != nullptr && config.align_weight > 0.0;
  auto targets_for = [&](const std::vector<LabeledInput>& set) {
    std::vector<Tensor<float>> out;
    if (!aligned) return out;
    for (const auto& ex : set) out.push_back(align->sum_of(ex.align_tokens));
    return out;
  };
  const auto train_targets = targets_for(train);
  const auto heldout_targets = targets_for(heldout);
  auto mean_square = [](std::span<const Tensor<float>> ts, std::span<const std::size_t> pick) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t i : pick) {
      for (float v : ts[i].values()) s += static_cast<double>(v) * v;
      n += ts[i].size();
    }
    return n ? s / static_cast<double>(n) : 1.0;
  };

  std::size_t outputs = 0;
  for (const auto& blk : blocks) outputs = std::max(outputs, blk.offset + blk.rows * blk.classes);
  std::mt19937_64 rng(config.seed);
  ParameterStore head;
  layers::add_linear(head, "head", encoder.width(), outputs, rng);

  std::set<std::string> names;
  for (const auto& n : encoder.params().names()) names.insert(n);
  for (const auto& n : head.names()) names.insert(n);
  AdamState adam(names, [&](const std::string&) { return config.learning_rate; });

  auto logits_for = [&](Binding<float>& b, const ad::Var<float>& raw, const HeadBlock& blk,
                        const ad::Var<float>& out) {
    (void)raw;
    std::vector<std::size_t> idx(blk.rows * blk.classes);
    std::iota(idx.begin(), idx.end(), blk.offset);
    (void)b;
    return ad::gather(out, idx, blk.rows, blk.classes);
  };

  EncoderPretrainMetrics metrics;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(std::max(1, config.batch_size));
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total_loss = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      ad::Graph<float> g;
      Binding<float> b(g, {&encoder.params(), &head}, [](const std::string&) { return true; });
      std::vector<ad::Var<float>> losses;
      // Alignment error is normalized by the batch's mean squared target.
      const auto picked = std::span(order).subspan(start, end - start);
      const float align_scale =
          aligned ? static_cast<float>(config.align_weight / (mean_square(train_targets, picked) *
                                                              static_cast<double>(encoder.width())))
                  : 0.0f;
      for (std::size_t i = start; i < end; ++i) {
        const LabeledInput& ex = train[order[i]];
        auto raw = g.constant(ex.raw);
        auto summary = ad::slice_rows(encoder.forward(b, raw), 0, 1);
        auto out = layers::linear(b, "head", summary);
        for (std::size_t k = 0; k < blocks.size(); ++k) {
          const auto& t = ex.targets[k];
          if (std::all_of(t.begin(), t.end(), [](int v) { return v == kIgnore; })) continue;
          losses.push_back(ad::cross_entropy(logits_for(b, raw, blocks[k], out), t, kIgnore));
        }
        if (aligned) {
          auto diff = ad::sub(summary, g.constant(train_targets[order[i]]));
          losses.push_back(ad::scale(ad::sum(ad::mul(diff, diff)), align_scale));
        }
      }
      auto loss = ad::scale(ad::sum(ad::concat_rows<float>(losses)),
                            1.0f / static_cast<float>(end - start));
      if (!std::isfinite(loss.value()[0])) {
        fail(ErrorCategory::kNumerical, "encoder pretraining diverged at epoch " + std::to_string(epoch));
      }
      g.backward(loss);
      auto grads = b.gradients();
      adam.step({&encoder.params(), &head}, std::map<std::string, Tensor<float>>(grads.begin(), grads.end()));
      total_loss += loss.value()[0];
      ++batches;
    }
    metrics.epoch_loss.push_back(batches ? total_loss / static_cast<double>(batches) : 0.0);
  }

  std::size_t hits = 0, total = 0;
  double align_error = 0.0;
  for (std::size_t h = 0; h < heldout.size(); ++h) {
    const LabeledInput& ex = heldout[h];
    ad::Graph<float> g;
    Binding<float> b(g, {&encoder.params(), &head});
    auto raw = g.constant(ex.raw);
    auto summary = ad::slice_rows(encoder.forward(b, raw), 0, 1);
    auto out = layers::linear(b, "head", summary);
    if (aligned) {
      const auto& target = heldout_targets[h];
      for (std::size_t j = 0; j < target.size(); ++j) {
        const double e = static_cast<double>(summary.value()[j]) - target.values()[j];
        align_error += e * e;
      }
    }
    for (std::size_t k = 0; k < blocks.size(); ++k) {
      const auto logits = logits_for(b, raw, blocks[k], out).value();
      for (std::size_t r = 0; r < blocks[k].rows; ++r) {
        const int target = ex.targets[k][r];
        if (target == kIgnore) continue;
        auto row = logits.row(r);
        const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        hits += pred == target ? 1 : 0;
        ++total;
      }
    }
  }
  metrics.heldout_accuracy = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  if (aligned && !heldout.empty()) {
    std::vector<std::size_t> all(heldout.size());
    std::iota(all.begin(), all.end(), 0);
    metrics.heldout_alignment_error =
        align_error / (mean_square(heldout_targets, all) * static_cast<double>(heldout.size() * encoder.width()));
  }
  return metrics;
}

// Blocks: 12 (color, form) presence rows x 2, 3 per-form count rows x 5,
// 1 face-tone row x 2.
const std::vector<HeadBlock> kVisionBlocks = {{0, 12, 2}, {24, 3, 5}, {39, 1, 2}};

LabeledInput scene_example(const Scene& scene) {
  LabeledInput ex{scene.image.as_row<float>(), {}, {}};
  std::vector<int> presence(12, 0), counts(3, 0);
  for (const auto& o : scene.objects) {
    presence[static_cast<std::size_t>(o.color) * 3 + static_cast<std::size_t>(o.form)] = 1;
    ++counts[static_cast<std::size_t>(o.form)];
  }
  ex.targets = {presence, counts, {kIgnore}};
  ex.align_tokens = scene_summary_tokens(scene);
  return ex;
}

LabeledInput face_example(const RawImage& frame, bool positive) {
  return LabeledInput{frame.as_row<float>(),
                      {std::vector<int>(12, kIgnore), std::vector<int>(3, kIgnore), {positive ? 1 : 0}},
                      {tone_word(positive)}};
}

}  // namespace

Tensor<float> AlignmentTargets::sum_of(const std::vector<std::string>& tokens) const {
  if (token_table == nullptr || vocab == nullptr) fail(ErrorCategory::kConfig, "alignment targets are unset");
  Tensor<float> out(1, token_table->cols());
  for (const auto& t : tokens) {
    const auto row = token_table->row(static_cast<std::size_t>(vocab->id(t)));
    for (std::size_t j = 0; j < row.size(); ++j) out(0, j) += row[j];
  }
  return out;
}

EncoderPretrainMetrics pretrain_vision_encoder(VisionEncoder& encoder, const EncoderPretrainConfig& config,
                                               const AlignmentTargets* align) {
  auto make = [&](std::uint64_t stream, std::size_t scenes, std::size_t faces) {
    std::vector<LabeledInput> out;
    SceneSpec spec;
    spec.min_objects = 0;
    for (std::size_t i = 0; i < scenes; ++i) {
      out.push_back(scene_example(generate_scene(derive_seed(config.seed, stream, i), spec)));
    }
    for (std::size_t i = 0; out.size() < scenes + faces; ++i) {
      const auto s = generate_trimodal(derive_seed(config.seed, stream + 1, i));
      for (const auto& f : s.frames) {
        if (out.size() < scenes + faces) out.push_back(face_example(f, s.tone_positive));
      }
    }
    return out;
  };
  const auto train = make(100, config.scenes, config.frames);
  const auto heldout = make(300, std::max<std::size_t>(1, config.scenes / 10),
                            std::max<std::size_t>(1, config.frames / 10));
  return run_classification_pretraining(encoder, train, heldout, kVisionBlocks, config, align);
}

EncoderPretrainMetrics pretrain_audio_encoder(AudioEncoder& encoder, const EncoderPretrainConfig& config,
                                              const AlignmentTargets* align) {
  // Blocks: tone (2 classes) and the exact cycle count among the 6 used.
  const std::vector<HeadBlock> blocks = {{0, 1, 2}, {2, 1, 6}};
  auto make = [&](std::uint64_t stream, std::size_t windows) {
    std::vector<LabeledInput> out;
    for (std::size_t i = 0; out.size() < windows; ++i) {
      const auto s = generate_trimodal(derive_seed(config.seed, stream, i));
      for (const auto& w : s.audio_windows) {
        if (out.size() >= windows) break;
        // Recover the cycle count by brute-force DFT peak; the generator does
        // not expose it.
        int best = 1;
        double best_mag = -1;
        for (int k = 1; k < static_cast<int>(w.size()) / 2; ++k) {
          double re = 0, im = 0;
          for (std::size_t n = 0; n < w.size(); ++n) {
            const double ang = 2.0 * M_PI * k * static_cast<double>(n) / static_cast<double>(w.size());
            re += w[n] * std::cos(ang);
            im -= w[n] * std::sin(ang);
          }
          const double mag = re * re + im * im;
          if (mag > best_mag) {
            best_mag = mag;
            best = k;
          }
        }
        int cycle_class = 0;
        const auto& band = s.tone_positive ? kPositiveToneCycles : kNegativeToneCycles;
        for (std::size_t c = 0; c < band.size(); ++c)
          if (band[c] == best) cycle_class = static_cast<int>(c) + (s.tone_positive ? 3 : 0);
        out.push_back(LabeledInput{Tensor<float>(1, w.size(), w),
                                   {{s.tone_positive ? 1 : 0}, {cycle_class}},
                                   {tone_word(s.tone_positive)}});
      }
    }
    return out;
  };
  const auto train = make(400, config.windows);
  const auto heldout = make(500, std::max<std::size_t>(1, config.windows / 10));
  return run_classification_pretraining(encoder, train, heldout, blocks, config, align);
}

// ---------------------------------------------------------------------------
// Feature files

void write_features(const std::filesystem::path& path, std::span<const Tensor<float>> sequences) {
  io::ByteWriter w;
  w.bytes("PFFT");
  w.u32(kFeatureFormatVersion);
  w.u32(static_cast<std::uint32_t>(sequences.size()));
  for (const auto& s : sequences) {
    w.u32(static_cast<std::uint32_t>(s.rows()));
    w.u32(static_cast<std::uint32_t>(s.cols()));
    for (float v : s.values()) w.f32(v);
  }
  io::write_file(path.string(), w.data());
}

std::vector<Tensor<float>> load_precomputed_features(const std::filesystem::path& path,
                                                     std::size_t expected_width) {
  io::ByteReader r(io::read_file(path.string()));
  if (r.remaining() < 4 || r.bytes(4) != "PFFT") {
    fail(ErrorCategory::kBadMagic, "'" + path.string() + "' is not a feature file");
  }
  const std::uint32_t version = r.u32();
  if (version != kFeatureFormatVersion) {
    fail(ErrorCategory::kVersionMismatch, "feature file version " + std::to_string(version) +
                                              ", expected " + std::to_string(kFeatureFormatVersion));
  }
  const std::uint32_t count = r.u32();
  std::vector<Tensor<float>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    const std::uint32_t width = r.u32();
    if (width != expected_width) {
      fail(ErrorCategory::kWidthMismatch, "feature sequence " + std::to_string(i) + " has width " +
                                              std::to_string(width) + ", expected " +
                                              std::to_string(expected_width));
    }
    Tensor<float> t(len, width);
    for (auto& v : t.values()) v = r.f32();
    out.push_back(std::move(t));
  }
  if (!r.at_end()) fail(ErrorCategory::kTruncated, "trailing bytes after feature sequences");
  return out;
}

}  // namespace promptfuse
