// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "promptfuse/fusion.hpp"
#include "promptfuse/tasks.hpp"
#include "promptfuse/transformer.hpp"
#include "test_support.hpp"

using namespace promptfuse;

namespace {

ModelConfig small_config(int encoder_layers = 2) {
  ModelConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.encoder_layers = encoder_layers;
  c.decoder_layers = 1;
  c.ffn = 32;
  c.max_len = 24;
  c.vocab_size = static_cast<int>(lab_vocabulary().size());
  return c;
}

// Replaces every weight with N(0, 0.5) draws so attention is far from uniform.
void roughen(EncoderDecoderModel& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : model.params()) t = normal_tensor(t.rows(), t.cols(), 0.5f, rng);
}

Tensor<float> rows_of(const Tensor<float>& t, std::size_t begin, std::size_t count) {
  Tensor<float> out(count, t.cols());
  std::copy(t.data() + begin * t.cols(), t.data() + (begin + count) * t.cols(), out.data());
  return out;
}

StepLogits scripted(std::vector<std::vector<float>> steps) {
  return [steps](std::span<const int> prefix) { return steps.at(prefix.size() - 1); };
}

}  // namespace

TEST_SUITE("transformer") {
  TEST_CASE("vocabulary ids and tokens are mutual inverses") {
    const Vocab& v = lab_vocabulary();
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(v.id(v.token(static_cast<int>(i))) == static_cast<int>(i));
    CHECK(v.id("<pad>") == Vocab::kPad);
    const auto ids = v.encode("how many square ?");
    for (int id : ids) CHECK(id > Vocab::kMask);
    CHECK(v.decode(ids) == "how many square ?");
    CHECK_THROWS_AS(v.encode("how many dodecahedron ?"), Error);
  }

  TEST_CASE("config validation") {
    auto c = small_config();
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), Error);
    CHECK(small_config().fingerprint() == small_config().fingerprint());
    auto d = small_config();
    d.ffn = 48;
    CHECK(d.fingerprint() != small_config().fingerprint());
  }

  TEST_CASE("parameter names are unique and carry the model prefix") {
    EncoderDecoderModel m(small_config(), 3);
    const auto names = m.params().names();
    CHECK(std::set<std::string>(names.begin(), names.end()).size() == names.size());
    for (const auto& n : names) CHECK(n.rfind("plm.", 0) == 0);
  }

  TEST_CASE("encoder preserves shape and is deterministic") {
    EncoderDecoderModel m(small_config(), 4);
    std::mt19937_64 rng(1);
    const auto x = normal_tensor(7, 16, 1.0f, rng);
    const auto y = m.encode(x, nullptr);
    CHECK(y.rows() == 7);
    CHECK(y.cols() == 16);
    CHECK(m.encode(x, nullptr) == y);
  }

  TEST_CASE("encoder rejects overflow and mismatched masks") {
    EncoderDecoderModel m(small_config(), 4);
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(m.encode(normal_tensor(25, 16, 1.0f, rng), nullptr), Error);
    const auto mask = AttentionMaskSpec::full(5);
    CHECK_THROWS_AS(m.encode(normal_tensor(6, 16, 1.0f, rng), &mask), Error);
  }

  TEST_CASE("single layer: a blocked column does not reach the blocked row") {
    EncoderDecoderModel m(small_config(1), 5);
    roughen(m, 6);
    std::mt19937_64 rng(2);
    auto x = normal_tensor(4, 16, 1.0f, rng);
    auto mask = AttentionMaskSpec::full(4);
    mask.additive(1, 3) = ad::kMaskedLogit<float>;
    const auto before = m.encode(x, &mask);
    for (std::size_t c = 0; c < 16; ++c) x(3, c) += 1.5f;
    const auto after = m.encode(x, &mask);
    CHECK(rows_of(before, 1, 1) == rows_of(after, 1, 1));
    CHECK_FALSE(rows_of(before, 0, 1) == rows_of(after, 0, 1));
  }

  TEST_CASE("BlindPrompt prompt outputs ignore the input for 1 to 4 layers") {
    const std::size_t n_prompts = 3, n_input = 6;
    for (int layers = 1; layers <= 4; ++layers) {
      CAPTURE(layers);
      EncoderDecoderModel m(small_config(layers), 10 + layers);
      roughen(m, 20 + layers);
      std::mt19937_64 rng(30 + layers);
      auto x = normal_tensor(n_prompts + n_input, 16, 1.0f, rng);
      const auto mask = build_attention_mask(n_prompts, n_input, FusionMethod::kBlindPrompt);
      const auto reference = rows_of(m.encode(x, &mask), 0, n_prompts);
      for (int trial = 0; trial < 10; ++trial) {
        auto perturbed = x;
        for (std::size_t r = n_prompts; r < perturbed.rows(); ++r)
          for (std::size_t c = 0; c < 16; ++c) perturbed(r, c) = std::normal_distribution<float>(0, 2)(rng);
        const auto out = m.encode(perturbed, &mask);
        CHECK(rows_of(out, 0, n_prompts) == reference);
      }
      // The same perturbation moves the prompt outputs when nothing is masked.
      const auto open = build_attention_mask(n_prompts, n_input, FusionMethod::kPromptFuse);
      auto moved = x;
      moved(n_prompts, 0) += 1.0f;
      CHECK_FALSE(rows_of(m.encode(moved, &open), 0, n_prompts) == rows_of(m.encode(x, &open), 0, n_prompts));
    }
  }

  TEST_CASE("BlindPrompt attention from prompt rows to input columns is exactly zero") {
    EncoderDecoderModel m(small_config(3), 7);
    roughen(m, 8);
    std::mt19937_64 rng(9);
    const std::size_t n_prompts = 4, n_input = 5;
    const auto mask = build_attention_mask(n_prompts, n_input, FusionMethod::kBlindPrompt);
    ad::Graph<float> g;
    Binding<float> b(g, {&m.params()});
    std::vector<Tensor<float>> trace;
    m.encode(b, g.constant(normal_tensor(n_prompts + n_input, 16, 1.0f, rng)), &mask, 0, &trace);
    CHECK(trace.size() == 3 * 2);
    for (const auto& probs : trace) {
      for (std::size_t i = 0; i < n_prompts; ++i) {
        float row = 0.0f;
        for (std::size_t j = 0; j < probs.cols(); ++j) {
          if (j >= n_prompts) CHECK(probs(i, j) == 0.0f);
          row += probs(i, j);
        }
        CHECK(row == doctest::Approx(1.0f).epsilon(1e-6));
      }
      for (std::size_t i = n_prompts; i < probs.rows(); ++i)
        for (std::size_t j = 0; j < probs.cols(); ++j) CHECK(probs(i, j) > 0.0f);
    }
  }

  TEST_CASE("without positional embeddings the encoder is permutation equivariant") {
    EncoderDecoderModel m(small_config(2), 12);
    roughen(m, 13);
    m.params().at("plm.enc_pos").fill(0.0f);
    std::mt19937_64 rng(14);
    const auto x = normal_tensor(6, 16, 1.0f, rng);
    std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
    Tensor<float> px(6, 16);
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 16; ++c) px(r, c) = x(perm[r], c);
    const auto y = m.encode(x, nullptr);
    const auto py = m.encode(px, nullptr);
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 16; ++c) CHECK(py(r, c) == doctest::Approx(y(perm[r], c)).epsilon(1e-5));
  }

  TEST_CASE("greedy decoding follows the argmax") {
    auto one_hot = [](int id) {
      std::vector<float> v(8, 0.0f);
      v[static_cast<std::size_t>(id)] = 1.0f;
      return v;
    };
    CHECK(greedy_decode(scripted({one_hot(5), one_hot(7), one_hot(4), one_hot(Vocab::kEos)}), 10) ==
          std::vector<int>{5, 7, 4});
    CHECK(greedy_decode(scripted({one_hot(Vocab::kEos)}), 10).empty());
    CHECK(greedy_decode(scripted({one_hot(5), one_hot(6), one_hot(7)}), 2) == std::vector<int>{5, 6});
    std::vector<float> tie(8, 0.0f);
    tie[6] = tie[4] = 2.0f;
    CHECK(greedy_decode(scripted({tie, one_hot(Vocab::kEos)}), 5) == std::vector<int>{4});
  }

  TEST_CASE("greedy decoding is stable under perturbations below the margin") {
    std::mt19937_64 rng(15);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<std::vector<float>> steps(4, std::vector<float>(10));
      for (auto& s : steps) {
        for (auto& v : s) v = u(rng);
      }
      steps[3][Vocab::kEos] = 5.0f;
      const auto base = greedy_decode(scripted(steps), 4);
      float margin = 1e9f;
      for (const auto& s : steps) {
        auto sorted = s;
        std::sort(sorted.rbegin(), sorted.rend());
        margin = std::min(margin, sorted[0] - sorted[1]);
      }
      auto noisy = steps;
      for (auto& s : noisy) {
        for (auto& v : s) v += 0.45f * margin * u(rng);
      }
      CHECK(greedy_decode(scripted(noisy), 4) == base);
    }
  }

  TEST_CASE("sequence cross entropy closed forms") {
    ad::Graph<double> g;
    const std::vector<int> targets{5, 2};
    auto uniform = g.constant(Tensor<double>(2, 9));
    CHECK(sequence_cross_entropy(uniform, targets).value()[0] == doctest::Approx(std::log(9.0)).epsilon(1e-12));

    Tensor<double> sharp(1, 9);
    sharp(0, 5) = 800.0;
    CHECK(sequence_cross_entropy(g.constant(sharp), std::vector<int>{5}).value()[0] < 1e-300);

    std::mt19937_64 rng(3);
    auto logits = promptfuse::testing::random_tensor(2, 9, rng);
    const double single =
        sequence_cross_entropy(g.constant(Tensor<double>(1, 9, std::vector<double>(logits.data(), logits.data() + 9))),
                               std::vector<int>{4})
            .value()[0];
    CHECK(sequence_cross_entropy(g.constant(logits), std::vector<int>{4, Vocab::kPad}).value()[0] == single);
    CHECK_THROWS_AS(sequence_cross_entropy(g.constant(logits), std::vector<int>{4}), Error);
  }

  TEST_CASE("pretraining is deterministic and zero epochs keep the initialization") {
    const Vocab& vocab = lab_vocabulary();
    std::vector<TextExample> corpus;
    for (std::uint64_t s = 0; s < 24; ++s) {
      const auto scene = generate_scene(derive_seed(5, 1, s), {});
      corpus.push_back(text_only_example(generate_qa(scene, derive_seed(5, 2, s)), vocab));
    }
    PretrainConfig tc{.epochs = 0, .batch_size = 8, .learning_rate = 1e-3, .seed = 4, .position_jitter = true};
    const auto untouched = pretrain_language_model(corpus, corpus, small_config(), tc);
    CHECK(untouched.model.params().hash() == EncoderDecoderModel(small_config(), 4).params().hash());
    CHECK(untouched.metrics.epoch_loss.empty());

    tc.epochs = 2;
    const auto a = pretrain_language_model(corpus, corpus, small_config(), tc);
    const auto b = pretrain_language_model(corpus, corpus, small_config(), tc);
    CHECK(a.model.params().hash() == b.model.params().hash());
    CHECK(a.metrics.epoch_loss == b.metrics.epoch_loss);
    CHECK(a.model.params().hash() != untouched.model.params().hash());
  }

  TEST_CASE("decoder sequences") {
    const std::vector<int> answer{9, 12};
    CHECK(EncoderDecoderModel::decoder_input_for(answer) == std::vector<int>{Vocab::kBos, 9, 12});
    CHECK(EncoderDecoderModel::decoder_target_for(answer) == std::vector<int>{9, 12, Vocab::kEos});
  }
}
