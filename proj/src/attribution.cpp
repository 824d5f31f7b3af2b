// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptfuse/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

#include "promptfuse/binary_io.hpp"

namespace promptfuse {

IGResult integrated_gradients(const DifferentiableScalar& f, std::span<const double> input,
                              std::span<const double> baseline, int steps) {
  if (steps < 1) fail(ErrorCategory::kInvalidArgument, "integrated gradients needs m >= 1");
  if (input.size() != baseline.size()) {
    fail(ErrorCategory::kShapeMismatch, "input and baseline sizes differ");
  }
  const std::size_t n = input.size();
  std::vector<double> grad_sum(n, 0.0);
  std::vector<double> point(n);
  IGResult r;
  r.steps = steps;
  for (int k = 1; k <= steps; ++k) {
    const double alpha = static_cast<double>(k) / static_cast<double>(steps);
    for (std::size_t i = 0; i < n; ++i) point[i] = baseline[i] + alpha * (input[i] - baseline[i]);
    const ValueAndGradient vg = f(point);
    if (vg.gradient.size() != n) fail(ErrorCategory::kShapeMismatch, "gradient size differs from input size");
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(vg.gradient[i])) {
        fail(ErrorCategory::kNumerical, "non-finite gradient at interpolation step k=" + std::to_string(k));
      }
      grad_sum[i] += vg.gradient[i];
    }
    if (k == steps) r.f_input = vg.value;
  }
  r.f_baseline = f(baseline).value;
  r.attributions.resize(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    r.attributions[i] = (input[i] - baseline[i]) * grad_sum[i] / static_cast<double>(steps);
    total += r.attributions[i];
  }
  r.delta = std::abs(total - (r.f_input - r.f_baseline));
  return r;
}

CompletenessReport completeness_check(const IGResult& result, double tolerance) {
  CompletenessReport c;
  c.delta = result.delta;
  c.allowed = tolerance * std::max(1.0, std::abs(result.f_input - result.f_baseline));
  c.pass = c.delta <= c.allowed;
  return c;
}

// ---------------------------------------------------------------------------

namespace {

struct VisualInput {
  std::size_t slot;
  std::size_t sample;
  std::size_t offset;
  Shape shape;
};

}  // namespace

ModelAttribution attribute(const FusionSystem& system, const FusionExample& example, const IGConfig& config,
                           std::size_t image_height, std::size_t image_width) {
  const auto& slots = system.spec().slots;
  std::vector<std::vector<Tensor<float>>> raws(slots.size());
  std::vector<VisualInput> visual;
  std::vector<double> x;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    raws[k] = system.raw_samples(example, k);
    if (!slots[k].visual()) continue;
    for (std::size_t s = 0; s < raws[k].size(); ++s) {
      const auto& r = raws[k][s];
      if (r.size() != image_height * image_width * 3) {
        fail(ErrorCategory::kShapeMismatch, "visual sample does not match the attribution image size");
      }
      visual.push_back({k, s, x.size(), r.shape()});
      x.insert(x.end(), r.values().begin(), r.values().end());
    }
  }
  const std::size_t text_offset = x.size();
  const auto& table = system.plm().params().at(EncoderDecoderModel::token_embedding_name());
  const std::size_t d = table.cols();
  for (int id : example.text) {
    auto row = table.row(static_cast<std::size_t>(id));
    x.insert(x.end(), row.begin(), row.end());
  }
  const std::vector<double> baseline(x.size(), 0.0);
  const Shape text_shape{example.text.size(), d};

  // Builds the first-step logits with leaves for every attributed input.
  auto first_logits = [&](ad::Graph<double>& g, Binding<double>& b, std::span<const double> point,
                          std::vector<ad::Var<double>>& leaves) {
    SystemInputs<double> inputs;
    for (std::size_t k = 0; k < slots.size(); ++k) {
      std::vector<ad::Var<double>> slot_raws;
      for (std::size_t s = 0; s < raws[k].size(); ++s) {
        if (slots[k].visual()) {
          const auto it = std::find_if(visual.begin(), visual.end(),
                                       [&](const VisualInput& v) { return v.slot == k && v.sample == s; });
          Tensor<double> t(it->shape.rows, it->shape.cols,
                           std::vector<double>(point.begin() + static_cast<std::ptrdiff_t>(it->offset),
                                               point.begin() + static_cast<std::ptrdiff_t>(it->offset +
                                                                                           it->shape.numel())));
          leaves.push_back(g.leaf(std::move(t), true));
          slot_raws.push_back(leaves.back());
        } else {
          slot_raws.push_back(g.constant(raws[k][s].cast<double>()));
        }
      }
      inputs.modality.push_back(system.encode_slot<double>(b, k, slot_raws));
    }
    Tensor<double> text(text_shape.rows, text_shape.cols,
                        std::vector<double>(point.begin() + static_cast<std::ptrdiff_t>(text_offset), point.end()));
    leaves.push_back(g.leaf(std::move(text), true));
    inputs.text = leaves.back();
    auto states = system.encoder_states(b, std::move(inputs));
    const std::vector<int> bos{Vocab::kBos};
    return system.plm().decoder_logits(b, states, bos);
  };

  int target = Vocab::kEos;
  {
    ad::Graph<double> g;
    Binding<double> b(g, system.stores());
    std::vector<ad::Var<double>> leaves;
    const auto logits = first_logits(g, b, x, leaves).value();
    double best = -INFINITY;
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      if (logits(0, c) > best) {
        best = logits(0, c);
        target = static_cast<int>(c);
      }
    }
  }

  DifferentiableScalar f = [&](std::span<const double> point) {
    ad::Graph<double> g;
    Binding<double> b(g, system.stores());
    std::vector<ad::Var<double>> leaves;
    auto out = ad::log_softmax_at(first_logits(g, b, point, leaves), 0, static_cast<std::size_t>(target));
    g.backward(out);
    ValueAndGradient vg;
    vg.value = out.value()[0];
    for (const auto& leaf : leaves) {
      const auto grad = g.grad(leaf);
      vg.gradient.insert(vg.gradient.end(), grad->values().begin(), grad->values().end());
    }
    return vg;
  };

  ModelAttribution out;
  out.ig = integrated_gradients(f, x, baseline, config.steps);
  out.target_token = target;
  out.prediction = system.predict(example);
  out.tokens = example.text;
  double image_mass = 0.0, token_mass = 0.0;
  for (const auto& v : visual) {
    Tensor<double> map(image_height, image_width);
    for (std::size_t r = 0; r < image_height; ++r)
      for (std::size_t c = 0; c < image_width; ++c)
        for (std::size_t ch = 0; ch < 3; ++ch) map(r, c) += out.ig.attributions[v.offset + (r * image_width + c) * 3 + ch];
    for (double a : std::span(out.ig.attributions).subspan(v.offset, v.shape.numel())) image_mass += std::abs(a);
    out.pixel_scores.push_back(std::move(map));
  }
  for (std::size_t t = 0; t < example.text.size(); ++t) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += out.ig.attributions[text_offset + t * d + j];
    out.token_scores.push_back(s);
    for (std::size_t j = 0; j < d; ++j) token_mass += std::abs(out.ig.attributions[text_offset + t * d + j]);
  }
  out.image_share = image_mass + token_mass > 0 ? image_mass / (image_mass + token_mass) : 0.0;
  return out;
}

ModelAttribution attribute_calibrated(const FusionSystem& system, const FusionExample& example,
                                      double tolerance, int start, int max_steps) {
  int m = std::max(1, start);
  ModelAttribution last = attribute(system, example, IGConfig{m});
  while (!completeness_check(last.ig, tolerance).pass && m * 2 <= max_steps) {
    m *= 2;
    last = attribute(system, example, IGConfig{m});
  }
  return last;
}

std::string graymap(const Tensor<double>& scores) {
  double peak = 0.0;
  for (double v : scores.values()) peak = std::max(peak, std::abs(v));
  std::string out = "P5\n" + std::to_string(scores.cols()) + " " + std::to_string(scores.rows()) + "\n255\n";
  for (double v : scores.values()) {
    const double level = peak > 0 ? std::round(255.0 * std::abs(v) / peak) : 0.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(level)));
  }
  return out;
}

std::vector<std::filesystem::path> export_attribution(const ModelAttribution& result, const Vocab& vocab,
                                                      const std::filesystem::path& directory,
                                                      const std::string& stem) {
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) fail(ErrorCategory::kIo, "cannot create '" + directory.string() + "': " + ec.message());
  nlohmann::json record;
  nlohmann::json tokens = nlohmann::json::array();
  for (std::size_t i = 0; i < result.tokens.size(); ++i) {
    tokens.push_back({{"token", vocab.token(result.tokens[i])}, {"score", result.token_scores[i]}});
  }
  record["tokens"] = tokens;
  record["prediction"] = vocab.decode(result.prediction);
  record["target_token"] = vocab.token(result.target_token);
  record["completeness_delta"] = result.ig.delta;
  record["f_input"] = result.ig.f_input;
  record["f_baseline"] = result.ig.f_baseline;
  record["steps"] = result.ig.steps;
  record["image_share"] = result.image_share;

  std::vector<std::filesystem::path> written;
  const auto json_path = directory / (stem + ".json");
  io::write_file(json_path.string(), record.dump(2) + "\n");
  written.push_back(json_path);
  for (std::size_t k = 0; k < result.pixel_scores.size(); ++k) {
    const auto pgm = directory / (stem + "_" + std::to_string(k) + ".pgm");
    io::write_file(pgm.string(), graymap(result.pixel_scores[k]));
    written.push_back(pgm);
  }
  return written;
}

}  // namespace promptfuse
