// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <filesystem>
#include <limits>
#include <random>

#include "doctest.h"
#include "promptfuse/checkpoint.hpp"
#include "promptfuse/optim.hpp"
#include "promptfuse/trainer.hpp"
#include "small_system.hpp"
#include "test_support.hpp"

using namespace promptfuse;
using promptfuse::testing::TempDir;
using promptfuse::testing::tiny_trimodal_examples;
using promptfuse::testing::tiny_trimodal_system;
using promptfuse::testing::tiny_vqa_examples;
using promptfuse::testing::tiny_vqa_system;

namespace {

const std::vector<FusionMethod> kAllMethods = {FusionMethod::kPromptFuse, FusionMethod::kBlindPrompt,
                                               FusionMethod::kFinetune,   FusionMethod::kLinear,
                                               FusionMethod::kJointProj,  FusionMethod::kBlackImage,
                                               FusionMethod::kNoPrompt};

std::set<std::string> with_prefix(const std::set<std::string>& names, const std::string& prefix) {
  std::set<std::string> out;
  for (const auto& n : names)
    if (n.rfind(prefix, 0) == 0) out.insert(n);
  return out;
}

double training_loss(const FusionSystem& system, const FusionExample& ex) {
  ad::Graph<float> g;
  Binding<float> b(g, system.stores());
  return system.loss(b, ex).value()[0];
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("partitions are disjoint and cover every parameter") {
    for (auto method : kAllMethods) {
      CAPTURE(method_name(method));
      const auto system = tiny_vqa_system(method);
      const auto p = partition_parameters(system, method);
      std::set<std::string> all = p.trainable;
      for (const auto& n : p.frozen) CHECK(all.insert(n).second);
      CHECK(all == system.parameter_names());
      for (const auto& n : with_prefix(all, "plm.")) CHECK(p.frozen.count(n) == 1);
    }
  }

  TEST_CASE("trainable sets per method") {
    auto names_of = [](FusionMethod m, int n = 20) {
      const auto system = tiny_vqa_system(m, n);
      return std::pair(system.parameter_names(), partition_parameters(system, m).trainable);
    };
    {
      const auto [all, trainable] = names_of(FusionMethod::kPromptFuse);
      CHECK(trainable == std::set<std::string>{"prompt.bank"});
      CHECK(tiny_vqa_system(FusionMethod::kPromptFuse, 20).fusion_params().at("prompt.bank").size() == 20 * 16);
    }
    CHECK(names_of(FusionMethod::kBlindPrompt).second == std::set<std::string>{"prompt.bank"});
    CHECK(names_of(FusionMethod::kBlackImage).second == std::set<std::string>{"prompt.bank"});
    CHECK(names_of(FusionMethod::kNoPrompt).second.empty());
    CHECK(names_of(FusionMethod::kLinear).second == std::set<std::string>{"linear.0.b", "linear.0.w"});
    CHECK(names_of(FusionMethod::kJointProj).second == std::set<std::string>{"joint.b", "joint.w"});
    {
      const auto [all, trainable] = names_of(FusionMethod::kFinetune);
      CHECK(trainable == with_prefix(all, "vision."));
      CHECK_FALSE(trainable.empty());
    }
    const auto tri = tiny_trimodal_system(FusionMethod::kFinetune);
    const auto names = tri.parameter_names();
    auto encoders = with_prefix(names, "vision.");
    encoders.merge(with_prefix(names, "audio."));
    CHECK(partition_parameters(tri, FusionMethod::kFinetune).trainable == encoders);

    auto enc = tiny_vqa_system(FusionMethod::kPromptFuse, 4, PositionMode::kBegin, PromptEncoderMode::kLinearLayer);
    CHECK(partition_parameters(enc, FusionMethod::kPromptFuse).trainable ==
          std::set<std::string>{"prompt.bank", "prompt.enc.b", "prompt.enc.w"});
  }

  TEST_CASE("Adam closed-form first step") {
    ParameterStore store;
    store.add("prompt.bank", Tensor<float>(1, 1));
    store.add("linear.0.w", Tensor<float>(1, 1));
    AdamState adam({"prompt.bank", "linear.0.w"},
                   [](const std::string& n) { return n == "prompt.bank" ? 0.5 : 5e-4; });
    adam.step({&store}, {{"prompt.bank", Tensor<float>(1, 1, 0.1f)}, {"linear.0.w", Tensor<float>(1, 1, 0.1f)}});
    CHECK(store.at("prompt.bank")[0] == doctest::Approx(-0.49999995).epsilon(1e-7));
    CHECK(store.at("linear.0.w")[0] == doctest::Approx(-5e-4 * 0.1 / (0.1 + 1e-8)).epsilon(1e-6));
    CHECK(adam.steps() == 1);
    CHECK(adam.first_moment("prompt.bank")[0] == doctest::Approx(0.01));
  }

  TEST_CASE("Adam with zero gradients leaves parameters unchanged") {
    ParameterStore store;
    store.add("prompt.bank", Tensor<float>(2, 2, 0.3f));
    AdamState adam({"prompt.bank"}, [](const std::string&) { return 0.5; });
    for (int i = 0; i < 5; ++i) adam.step({&store}, {{"prompt.bank", Tensor<float>(2, 2)}});
    CHECK(store.at("prompt.bank") == Tensor<float>(2, 2, 0.3f));
    CHECK(adam.steps() == 5);
  }

  TEST_CASE("Adam rejects non-finite and incomplete gradients before writing") {
    ParameterStore store;
    store.add("a", Tensor<float>(1, 2));
    store.add("b", Tensor<float>(1, 2));
    AdamState adam({"a", "b"}, [](const std::string&) { return 0.1; });
    Tensor<float> bad(1, 2, 1.0f);
    bad[1] = std::numeric_limits<float>::quiet_NaN();
    try {
      adam.step({&store}, {{"a", Tensor<float>(1, 2, 1.0f)}, {"b", bad}});
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.category() == ErrorCategory::kNumerical);
      CHECK(std::string(e.what()).find("'b'") != std::string::npos);
    }
    CHECK(store.at("a") == Tensor<float>(1, 2));
    CHECK_THROWS_AS(adam.step({&store}, {{"a", Tensor<float>(1, 2)}}), Error);
    CHECK_THROWS_AS(adam.step({&store}, {{"a", Tensor<float>(1, 2)}, {"b", Tensor<float>(1, 2)}, {"c", Tensor<float>(1, 2)}}),
                    Error);
    CHECK(adam.steps() == 0);
  }

  TEST_CASE("few-shot sampling") {
    const auto data = tiny_vqa_examples(30);
    const auto all = sample_few_shot(data, 30, 4);
    auto sorted = all.indices;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 30; ++i) CHECK(sorted[i] == i);
    CHECK(all.histogram.total == 30);

    const auto a = sample_few_shot(data, 10, 7), b = sample_few_shot(data, 10, 7);
    CHECK(a.indices == b.indices);
    CHECK(std::set<std::size_t>(a.indices.begin(), a.indices.end()).size() == 10);
    CHECK(sample_few_shot(data, 10, 8).indices != a.indices);

    const auto none = sample_few_shot(data, 0, 1);
    CHECK(none.indices.empty());
    CHECK(none.histogram.total == 0);
    CHECK(none.histogram.by_type.empty());
    CHECK_THROWS_AS(sample_few_shot(data, 31, 1), Error);
  }

  TEST_CASE("training changes only the trainable parameters") {
    const auto data = tiny_vqa_examples(6);
    const auto tri = tiny_trimodal_examples(4);
    for (auto method : kAllMethods) {
      if (method == FusionMethod::kNoPrompt) continue;
      CAPTURE(method_name(method));
      for (bool trimodal : {false, true}) {
        auto system = trimodal ? tiny_trimodal_system(method) : tiny_vqa_system(method);
        const auto partition = partition_parameters(system, method);
        const auto trainable_before = hash_parameters(system.stores(), partition.trainable);
        TrainConfig tc{.batch_size = 2, .epochs = 100, .seed = 1, .max_steps = 4, .evaluate_each_epoch = false};
        const auto result = train(system, trimodal ? std::span(tri) : std::span(data), partition, tc);
        CHECK(result.steps == 4);
        CHECK(result.frozen_hash_before == result.frozen_hash_after);
        CHECK(hash_parameters(system.stores(), partition.frozen) == result.frozen_hash_before);
        CHECK(hash_parameters(system.stores(), partition.trainable) != trainable_before);
      }
    }
  }

  TEST_CASE("zero epochs leave every parameter unchanged") {
    auto system = tiny_vqa_system(FusionMethod::kPromptFuse);
    const auto partition = partition_parameters(system, FusionMethod::kPromptFuse);
    const auto before = hash_parameters(system.stores(), system.parameter_names());
    TrainConfig tc{.epochs = 0};
    const auto result = train(system, tiny_vqa_examples(4), partition, tc);
    CHECK(result.epochs.empty());
    CHECK(result.steps == 0);
    CHECK(hash_parameters(system.stores(), system.parameter_names()) == before);
  }

  TEST_CASE("training is deterministic") {
    const auto data = tiny_vqa_examples(8);
    auto run = [&] {
      auto system = tiny_vqa_system(FusionMethod::kBlindPrompt);
      TrainConfig tc{.batch_size = 3, .epochs = 2, .seed = 5};
      auto r = train(system, data, partition_parameters(system, FusionMethod::kBlindPrompt), tc, data);
      return std::pair(r, system.fusion_params().hash());
    };
    const auto [a, ha] = run();
    const auto [b, hb] = run();
    CHECK(ha == hb);
    CHECK(a.step_losses == b.step_losses);
    REQUIRE(a.epochs.size() == 2);
    for (std::size_t e = 0; e < 2; ++e) {
      CHECK(a.epochs[e].loss == b.epochs[e].loss);
      CHECK(a.epochs[e].eval.accuracy == b.epochs[e].eval.accuracy);
      CHECK(a.epochs[e].eval.accuracy_by_kind == b.epochs[e].eval.accuracy_by_kind);
    }
  }

  TEST_CASE("small learning rate descends on a fixed batch") {
    const auto data = tiny_vqa_examples(4);
    auto system = tiny_vqa_system(FusionMethod::kPromptFuse);
    TrainConfig tc{.batch_size = 4, .epochs = 5, .seed = 2, .learning_rate_override = 1e-3,
                   .evaluate_each_epoch = false};
    const auto r = train(system, data, partition_parameters(system, FusionMethod::kPromptFuse), tc);
    REQUIRE(r.step_losses.size() == 5);
    for (std::size_t i = 1; i < 5; ++i) CHECK(r.step_losses[i] <= r.step_losses[i - 1]);
  }

  TEST_CASE("frozen parameters stay connected to the loss") {
    auto system = tiny_vqa_system(FusionMethod::kPromptFuse);
    const auto ex = tiny_vqa_examples(1)[0];
    const double base = training_loss(system, ex);
    const auto partition = partition_parameters(system, FusionMethod::kPromptFuse);
    std::mt19937_64 rng(3);
    std::normal_distribution<float> noise(0.0f, 0.05f);
    for (const std::string name : {"plm.enc.0.ffn.in.w", "plm.tok_emb", "plm.dec.0.cross.q.w"}) {
      CAPTURE(name);
      REQUIRE(partition.frozen.count(name) == 1);
      auto moved = tiny_vqa_system(FusionMethod::kPromptFuse);
      for (ParameterStore* s : moved.mutable_stores()) {
        if (s->contains(name))
          for (auto& v : s->at(name).values()) v += noise(rng);
      }
      CHECK(training_loss(moved, ex) != base);
    }
    auto vision_moved = tiny_vqa_system(FusionMethod::kPromptFuse);
    for (ParameterStore* s : vision_moved.mutable_stores())
      for (auto& [name, t] : *s)
        if (name.rfind("vision.", 0) == 0)
          for (auto& v : t.values()) v += noise(rng);
    CHECK(training_loss(vision_moved, ex) != base);
  }

  TEST_CASE("non-finite loss aborts and dumps the last good parameters") {
    TempDir dir("lastgood");
    auto system = tiny_vqa_system(FusionMethod::kPromptFuse);
    system.fusion_params().at("prompt.bank")(0, 0) = std::numeric_limits<float>::infinity();
    TrainConfig tc{.epochs = 1, .last_good_checkpoint = dir.path() / "last.pfck"};
    try {
      train(system, tiny_vqa_examples(2), partition_parameters(system, FusionMethod::kPromptFuse), tc);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.category() == ErrorCategory::kNumerical);
    }
    const auto ckpt = load_checkpoint(dir.path() / "last.pfck", system.plm().config().fingerprint());
    CHECK(ckpt.params.names() == std::vector<std::string>{"prompt.bank"});
  }

  TEST_CASE("invalid partitions and learning rates are rejected") {
    auto system = tiny_vqa_system(FusionMethod::kPromptFuse);
    auto p = partition_parameters(system, FusionMethod::kPromptFuse);
    auto overlap = p;
    overlap.trainable.insert("plm.tok_emb");
    CHECK_THROWS_AS(train(system, tiny_vqa_examples(2), overlap, TrainConfig{}), Error);
    auto missing = p;
    missing.frozen.erase("plm.tok_emb");
    CHECK_THROWS_AS(train(system, tiny_vqa_examples(2), missing, TrainConfig{}), Error);
    TrainConfig bad{.prompt_learning_rate = 0.0};
    CHECK_THROWS_AS(train(system, tiny_vqa_examples(2), p, bad), Error);
  }

  TEST_CASE("evaluation metrics") {
    auto system = tiny_trimodal_system(FusionMethod::kNoPrompt, 0);
    const auto data = tiny_trimodal_examples(12);
    const auto m = evaluate(system, data, nullptr);
    CHECK(m.count == 12);
    CHECK(m.accuracy >= 0.0);
    CHECK(m.accuracy <= 1.0);
    CHECK(evaluate(system, std::span<const FusionExample>(), nullptr).count == 0);
  }
}
