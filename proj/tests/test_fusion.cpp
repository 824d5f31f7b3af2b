// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <random>
#include <set>

#include "doctest.h"
#include "promptfuse/fusion.hpp"
#include "promptfuse/gradcheck.hpp"
#include "gradcheck_cases.hpp"
#include "small_system.hpp"

using namespace promptfuse;
using promptfuse::testing::fused_grad_cases;
using promptfuse::testing::fused_loss_gradcheck;
using promptfuse::testing::tiny_trimodal_examples;
using promptfuse::testing::tiny_trimodal_system;
using promptfuse::testing::tiny_vqa_examples;
using promptfuse::testing::tiny_vqa_system;

namespace {

std::vector<ad::Var<double>> rows_as_vars(ad::Graph<double>& g, std::initializer_list<std::size_t> counts,
                                          std::mt19937_64& rng, std::size_t width) {
  std::vector<ad::Var<double>> out;
  for (std::size_t n : counts) {
    Tensor<double> t(n, width);
    for (auto& v : t.values()) v = std::normal_distribution<double>(0, 1)(rng);
    out.push_back(g.constant(t));
  }
  return out;
}

}  // namespace

TEST_SUITE("fusion") {
  TEST_CASE("method, position and encoder names round-trip") {
    for (auto m : {FusionMethod::kPromptFuse, FusionMethod::kBlindPrompt, FusionMethod::kFinetune,
                   FusionMethod::kLinear, FusionMethod::kJointProj, FusionMethod::kBlackImage,
                   FusionMethod::kNoPrompt})
      CHECK(parse_method(method_name(m)) == m);
    for (auto p : {PositionMode::kBegin, PositionMode::kMiddle, PositionMode::kEnd})
      CHECK(parse_position(position_name(p)) == p);
    CHECK_THROWS_AS(parse_method("Adapter"), Error);
  }

  TEST_CASE("mask examples") {
    const auto open = build_attention_mask(2, 3, FusionMethod::kPromptFuse);
    CHECK(open.length == 5);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) CHECK_FALSE(open.blocked(i, j));
    const auto blind = build_attention_mask(2, 3, FusionMethod::kBlindPrompt);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) CHECK(blind.blocked(i, j) == (i < 2 && j >= 2));
    CHECK(build_attention_mask(0, 3, FusionMethod::kPromptFuse).length == 3);
    CHECK_THROWS_AS(build_attention_mask(0, 3, FusionMethod::kBlindPrompt), Error);
  }

  TEST_CASE("BlindPrompt mask is exact for every size up to 16 x 16") {
    for (std::size_t n = 1; n <= 16; ++n) {
      for (std::size_t m = 0; m <= 16; ++m) {
        const auto mask = build_attention_mask(n, m, FusionMethod::kBlindPrompt);
        bool ok = mask.length == n + m;
        for (std::size_t i = 0; i < n + m; ++i)
          for (std::size_t j = 0; j < n + m; ++j) ok = ok && mask.blocked(i, j) == (i < n && j >= n);
        CHECK_MESSAGE(ok, "n_prompts=" << n << " n_input=" << m);
        const auto open = build_attention_mask(n, m, FusionMethod::kPromptFuse);
        bool all_open = true;
        for (float v : open.additive.values()) all_open = all_open && v == 0.0f;
        CHECK(all_open);
      }
    }
  }

  TEST_CASE("mask with scattered prompt positions") {
    const std::vector<std::size_t> prompts{1, 4};
    const auto mask = build_attention_mask(6, prompts, FusionMethod::kBlindPrompt);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        const bool pi = i == 1 || i == 4, pj = j == 1 || j == 4;
        CHECK(mask.blocked(i, j) == (pi && !pj));
      }
    const std::vector<std::size_t> dup{2, 2};
    CHECK_THROWS_AS(build_attention_mask(4, dup, FusionMethod::kBlindPrompt), Error);
  }

  TEST_CASE("fused layout per position mode") {
    ad::Graph<double> g;
    std::mt19937_64 rng(1);
    auto parts = rows_as_vars(g, {2, 1, 3}, rng, 4);
    const std::optional<ad::Var<double>> prompts = parts[0];
    const std::vector<ad::Var<double>> modality{parts[1]};
    auto check = [&](PositionMode mode, std::vector<std::size_t> p, std::vector<std::size_t> v,
                     std::vector<std::size_t> t, std::vector<std::size_t> source_rows) {
      const auto fused = assemble_fused_input<double>(prompts, modality, parts[2], mode, 4, 16);
      CHECK(fused.prompt_indices == p);
      CHECK(fused.modality_indices == v);
      CHECK(fused.text_indices == t);
      // source_rows maps each fused row to (part, row) encoded as part * 10 + row.
      for (std::size_t r = 0; r < source_rows.size(); ++r) {
        const auto& src = parts[source_rows[r] / 10].value();
        for (std::size_t c = 0; c < 4; ++c) CHECK(fused.embeddings.value()(r, c) == src(source_rows[r] % 10, c));
      }
    };
    check(PositionMode::kBegin, {0, 1}, {2}, {3, 4, 5}, {0, 1, 10, 20, 21, 22});
    check(PositionMode::kMiddle, {1, 2}, {0}, {3, 4, 5}, {10, 0, 1, 20, 21, 22});
    check(PositionMode::kEnd, {4, 5}, {0}, {1, 2, 3}, {10, 20, 21, 22, 0, 1});

    const auto none = assemble_fused_input<double>(std::nullopt, modality, parts[2], PositionMode::kBegin, 4, 16);
    CHECK(none.prompt_indices.empty());
    CHECK(none.embeddings.rows() == 4);
    CHECK_THROWS_AS(assemble_fused_input<double>(prompts, modality, parts[2], PositionMode::kBegin, 4, 5), Error);
    auto wide = rows_as_vars(g, {3}, rng, 5);
    CHECK_THROWS_AS(assemble_fused_input<double>(prompts, modality, wide[0], PositionMode::kBegin, 4, 16), Error);
  }

  TEST_CASE("prompt encoders") {
    const std::size_t d = 8;
    PromptBank identity({4, PositionMode::kBegin, PromptEncoderMode::kIdentity}, d, 5);
    CHECK(apply_prompt_encoder(identity.initial_parameters(), identity.config()) ==
          identity.initial_parameters().at(PromptBank::kBankName));

    PromptBank linear({4, PositionMode::kBegin, PromptEncoderMode::kLinearLayer}, d, 5);
    ParameterStore store = linear.initial_parameters();
    auto& w = store.at("prompt.enc.w");
    w.fill(0.0f);
    for (std::size_t i = 0; i < d; ++i) w(i, i) = 1.0f;
    store.at("prompt.enc.b").fill(0.0f);
    CHECK(apply_prompt_encoder(store, linear.config()) == store.at(PromptBank::kBankName));

    PromptBank lstm({5, PositionMode::kBegin, PromptEncoderMode::kRecurrent}, d, 6);
    ParameterStore rec = lstm.initial_parameters();
    const auto base = apply_prompt_encoder(rec, lstm.config());
    for (std::size_t k = 0; k < 5; ++k) {
      ParameterStore moved = rec;
      moved.at(PromptBank::kBankName)(k, 0) += 0.5f;
      const auto out = apply_prompt_encoder(moved, lstm.config());
      for (std::size_t i = 0; i < 5; ++i) {
        bool same = true;
        for (std::size_t c = 0; c < d; ++c) same = same && out(i, c) == base(i, c);
        CHECK(same == (i < k));
      }
    }
  }

  TEST_CASE("prompt bank initialization scale") {
    PromptBank bank({200, PositionMode::kBegin, PromptEncoderMode::kIdentity}, 64, 11);
    const auto& t = bank.initial_parameters().at(PromptBank::kBankName);
    double sum = 0, sq = 0;
    for (float v : t.values()) {
      sum += v;
      sq += static_cast<double>(v) * v;
    }
    const double n = static_cast<double>(t.size());
    CHECK(std::abs(sum / n) < 0.002);
    CHECK(std::sqrt(sq / n) == doctest::Approx(0.02).epsilon(0.05));
  }

  TEST_CASE("baseline transforms start as the pass-through") {
    const std::size_t d = 6;
    ParameterStore store;
    register_baseline_parameters(store, FusionMethod::kLinear, d, d, 1);
    register_baseline_parameters(store, FusionMethod::kJointProj, d, d, 1);
    ad::Graph<double> g;
    std::mt19937_64 rng(2);
    auto parts = rows_as_vars(g, {1, 4}, rng, d);
    Binding<double> b(g, {&store});
    const auto linear = apply_baseline_transform<double>(b, FusionMethod::kLinear, {parts[0]}, parts[1]);
    CHECK(linear.modality.at(0).value() == parts[0].value());
    CHECK(linear.text.value() == parts[1].value());

    auto zero = g.constant(Tensor<double>(1, d));
    const auto joint = apply_baseline_transform<double>(b, FusionMethod::kJointProj, {zero}, parts[1]);
    CHECK(joint.modality.empty());
    CHECK(joint.text.value() == parts[1].value());
    // With P = [0 | I] the visual vector never reaches the output.
    const auto joint_v = apply_baseline_transform<double>(b, FusionMethod::kJointProj, {parts[0]}, parts[1]);
    CHECK(joint_v.text.value() == parts[1].value());

    const auto pass = apply_baseline_transform<double>(b, FusionMethod::kNoPrompt, {parts[0]}, parts[1]);
    CHECK(pass.modality.at(0).value() == parts[0].value());
  }

  TEST_CASE("BlackImage sees the same visual embedding for every scene") {
    auto system = tiny_vqa_system(FusionMethod::kBlackImage);
    const auto examples = tiny_vqa_examples(2);
    const auto features = system.precompute_features(examples);
    CHECK(features[0][0] == features[1][0]);
    for (const auto& raw : system.raw_samples(examples[0], 0)) {
      for (float v : raw.values()) CHECK(v == 0.0f);
    }
    auto pf = tiny_vqa_system(FusionMethod::kPromptFuse);
    const auto pf_features = pf.precompute_features(examples);
    CHECK_FALSE(pf_features[0][0] == pf_features[1][0]);
  }

  TEST_CASE("parameter counts") {
    ParamCountConfig c{.d_model = 768, .d_visual = 768, .prompt_length = 20};
    CHECK(count_trainable_params(c, FusionMethod::kPromptFuse) == 15360);
    CHECK(count_trainable_params(c, FusionMethod::kBlindPrompt) == 15360);
    CHECK(count_trainable_params(c, FusionMethod::kBlackImage) == 15360);
    CHECK(count_trainable_params(c, FusionMethod::kLinear) == 590592);
    CHECK(count_trainable_params(c, FusionMethod::kJointProj) == 1180416);
    CHECK(count_trainable_params(c, FusionMethod::kNoPrompt) == 0);
    c.encoder_params = 12345;
    CHECK(count_trainable_params(c, FusionMethod::kFinetune) == 12345);
    for (std::size_t n = 1; n <= 100; n += 7) {
      for (std::size_t d : {16u, 64u, 768u}) {
        ParamCountConfig k{.d_model = d, .d_visual = d, .prompt_length = n};
        CHECK(count_trainable_params(k, FusionMethod::kPromptFuse) == n * d);
      }
    }
  }

  TEST_CASE("counted prompt parameters match the registered bank") {
    for (auto mode : {PromptEncoderMode::kIdentity, PromptEncoderMode::kLinearLayer, PromptEncoderMode::kRecurrent}) {
      PromptBank bank({7, PositionMode::kBegin, mode}, 16, 1);
      ParamCountConfig c{.d_model = 16, .d_visual = 16, .prompt_length = 7, .prompt_encoder = mode};
      CHECK(bank.initial_parameters().scalar_count() == count_trainable_params(c, FusionMethod::kPromptFuse));
    }
    ParameterStore lin, joint;
    register_baseline_parameters(lin, FusionMethod::kLinear, 16, 16, 1);
    register_baseline_parameters(joint, FusionMethod::kJointProj, 16, 16, 1);
    ParamCountConfig c{.d_model = 16, .d_visual = 16, .prompt_length = 7};
    CHECK(lin.scalar_count() == count_trainable_params(c, FusionMethod::kLinear));
    CHECK(joint.scalar_count() == count_trainable_params(c, FusionMethod::kJointProj));
  }

  TEST_CASE("end-to-end prompt gradients match central differences") {
    const auto vqa = tiny_vqa_examples(3);
    const auto tri = tiny_trimodal_examples(1);
    const auto cases = fused_grad_cases(vqa, tri);
    CHECK(cases.size() == 5);
    for (const auto& c : cases) {
      for (const auto& name : c.names) {
        CAPTURE(c.label);
        CAPTURE(name);
        CHECK(fused_loss_gradcheck(c.system, *c.example, name) <= 1e-4);
      }
    }
  }

  TEST_CASE("only prompt parameters receive gradients under prompt methods") {
    for (auto method : {FusionMethod::kPromptFuse, FusionMethod::kBlindPrompt}) {
      auto system = tiny_vqa_system(method, 3, PositionMode::kBegin, PromptEncoderMode::kLinearLayer);
      const auto partition = partition_parameters(system, method);
      ad::Graph<float> g;
      Binding<float> b(g, system.stores(), [&](const std::string& n) { return partition.trainable.count(n) > 0; });
      g.backward(system.loss(b, tiny_vqa_examples(1)[0]));
      for (const auto& [name, grad] : b.gradients()) {
        bool nonzero = false;
        for (float v : grad.values()) nonzero = nonzero || v != 0.0f;
        if (nonzero) CHECK(name.rfind("prompt.", 0) == 0);
      }
      CHECK(b.gradients().count("prompt.bank") == 1);
    }
  }
}
