// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "doctest.h"
#include "promptfuse/tasks.hpp"
#include "task_oracle.hpp"

using namespace promptfuse;

namespace {

std::string joined(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
  return out;
}

}  // namespace

TEST_SUITE("synthetic-tasks") {
  TEST_CASE("scenes are reproducible and render one region per object") {
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
      const auto a = generate_scene(seed, {});
      const auto b = generate_scene(seed, {});
      CHECK(a.objects == b.objects);
      CHECK(a.image == b.image);
      CHECK(oracle::regions(a.image).size() == a.objects.size());
      std::set<std::pair<int, int>> cells;
      for (const auto& o : a.objects) CHECK(cells.emplace(o.row, o.col).second);
    }
  }

  TEST_CASE("empty scenes and infeasible specs") {
    const auto empty = generate_scene(3, {.grid = 4, .min_objects = 0, .max_objects = 0});
    CHECK(empty.objects.empty());
    CHECK(empty.image.is_black());
    CHECK_THROWS_AS(generate_scene(1, {.grid = 4, .min_objects = 1, .max_objects = 17}), Error);
    CHECK_THROWS_AS(generate_scene(1, {.grid = 4, .min_objects = 3, .max_objects = 2}), Error);
    CHECK_THROWS_AS(generate_scene(1, {.grid = 4, .min_objects = 1, .max_objects = 5}), Error);
    CHECK(max_objects_for_grid(4) == 4);
  }

  TEST_CASE("answer examples") {
    Scene scene;
    scene.objects = {{Form::kSquare, Color::kRed, 0, 0}, {Form::kSquare, Color::kRed, 2, 2}};
    scene.image = render_scene(scene.objects, 4);
    CHECK(oracle::answer(scene.image, {"how", "many", "square", "?"}) == "2");
    CHECK(oracle::answer(scene.image, {"is", "there", "a", "blue", "circle", "?"}) == "no");
    CHECK(oracle::answer(RawImage::black(), {"how", "many", "triangle", "?"}) == "0");
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const auto qa = generate_qa(scene, seed);
      CHECK(oracle::answer(scene.image, qa.question) == joined(qa.answer));
      if (qa.type == QuestionType::kNumber && qa.question[2] == "square") CHECK(qa.answer[0] == "2");
      CHECK(qa.type != QuestionType::kOther);  // two squares: color is not uniquely answerable
    }
  }

  TEST_CASE("every question type appears with exact answers") {
    std::map<QuestionType, int> seen;
    for (std::uint64_t i = 0; i < 2000; ++i) {
      const auto scene = generate_scene(derive_seed(1, 1, i), {});
      const auto qa = generate_qa(scene, derive_seed(1, 2, i));
      ++seen[qa.type];
      REQUIRE(oracle::answer(scene.image, qa.question) == joined(qa.answer));
    }
    CHECK(seen[QuestionType::kNumber] > 300);
    CHECK(seen[QuestionType::kYesNo] > 300);
    CHECK(seen[QuestionType::kOther] > 300);
  }

  TEST_CASE("trimodal rule examples") {
    int checked_true = 0, checked_false = 0;
    for (std::uint64_t seed = 0; seed < 400; ++seed) {
      const auto s = generate_trimodal(seed);
      CHECK(s.label == (s.text_positive != s.tone_positive));
      CHECK(s.verbalized == (s.label ? "True" : "False"));
      if (s.text_positive && !s.tone_positive) {
        CHECK(s.verbalized == "True");
        ++checked_true;
      }
      if (s.text_positive && s.tone_positive) {
        CHECK(s.verbalized == "False");
        ++checked_false;
      }
      CHECK(oracle::trimodal_answer(s) == s.verbalized);
      const auto again = generate_trimodal(seed);
      CHECK(again.frames == s.frames);
      CHECK(again.audio_windows == s.audio_windows);
      CHECK(again.utterance == s.utterance);
    }
    CHECK(checked_true > 0);
    CHECK(checked_false > 0);
  }

  TEST_CASE("tone bands are recoverable from a clean waveform") {
    for (int cycles : {3, 4, 5, 10, 11, 12}) {
      std::vector<float> wave(64);
      for (std::size_t n = 0; n < 64; ++n)
        wave[n] = std::sin(2.0f * std::numbers::pi_v<float> * static_cast<float>(cycles * n) / 64.0f + 0.3f);
      CHECK(oracle::peak_cycles(wave) == cycles);
    }
  }

  TEST_CASE("splits are disjoint, exact in size and reproducible") {
    const auto a = build_qa_splits({.train = 512, .eval = 256}, 3);
    CHECK(a.train.size() == 512);
    CHECK(a.eval.size() == 256);
    std::set<std::uint64_t> train_seeds;
    for (const auto& s : a.train) train_seeds.insert(s.scene.seed);
    for (const auto& s : a.eval) CHECK(train_seeds.count(s.scene.seed) == 0);
    CHECK(a.train_histogram.total == 512);
    CHECK(a.eval_histogram.total == 256);
    std::size_t sum = 0;
    for (const auto& [type, answers] : a.eval_histogram.by_type)
      for (const auto& [ans, n] : answers) sum += n;
    CHECK(sum == 256);

    const auto b = build_qa_splits({.train = 512, .eval = 256}, 3);
    for (std::size_t i = 0; i < 512; ++i) CHECK(a.train[i].question == b.train[i].question);

    const auto t = build_trimodal_splits({.train = 64, .eval = 32}, 4);
    std::set<std::uint64_t> tseeds;
    for (const auto& s : t.train) tseeds.insert(s.seed);
    for (const auto& s : t.eval) CHECK(tseeds.count(s.seed) == 0);
    CHECK(t.eval_histogram.total == 32);
  }

  TEST_CASE("oracle and majority predictors score as the histogram says") {
    const auto splits = build_qa_splits({.train = 0, .eval = 400}, 5);
    const std::string majority = splits.eval_histogram.majority_answer();
    std::size_t oracle_hits = 0, majority_hits = 0;
    for (const auto& s : splits.eval) {
      oracle_hits += oracle::answer(s.scene.image, s.question) == joined(s.answer);
      majority_hits += joined(s.answer) == majority;
    }
    CHECK(oracle_hits == splits.eval.size());
    CHECK(static_cast<double>(majority_hits) / 400.0 == doctest::Approx(splits.eval_histogram.majority_share()));

    const auto tri = build_trimodal_splits({.train = 0, .eval = 200}, 6);
    std::size_t tri_majority = 0;
    for (const auto& s : tri.eval) tri_majority += s.verbalized == tri.eval_histogram.majority_answer();
    CHECK(static_cast<double>(tri_majority) / 200.0 == doctest::Approx(tri.eval_histogram.majority_share()));
  }

  TEST_CASE("text renderings for language-model pretraining") {
    const Vocab& vocab = lab_vocabulary();
    const auto scene = generate_scene(12, {.grid = 4, .min_objects = 2, .max_objects = 4});
    const auto qa = generate_qa(scene, 4);
    const auto answer = text_only_example(qa, vocab);
    CHECK(answer.summary == vocab.encode(joined(scene_summary_tokens(scene))));
    CHECK(answer.input == vocab.encode(joined(instruction_words(PretrainTask::kAnswer)) + " " + joined(qa.question)));
    CHECK(answer.answer == vocab.encode(joined(qa.answer)));

    const auto caption = text_only_example(qa, vocab, SceneRendering::kSummary, PretrainTask::kCaption);
    CHECK(caption.answer == vocab.encode(joined(scene_caption(scene))));
    CHECK(caption.kind == "Caption");

    const auto words = text_only_example(qa, vocab, SceneRendering::kWords);
    CHECK(words.summary.empty());
    CHECK(words.input.size() == describe_scene(scene).size() + 2 + qa.question.size());

    // The caption lists objects by (color, form), whatever their cells.
    const auto cap = scene_caption(scene);
    std::vector<std::pair<int, int>> keys;
    for (std::size_t i = 0; i + 1 < cap.size(); i += 2) {
      int c = 0, f = 0;
      for (int k = 0; k < 4; ++k)
        if (cap[i] == color_word(kColors[static_cast<std::size_t>(k)])) c = k;
      for (int k = 0; k < 3; ++k)
        if (cap[i + 1] == form_word(kForms[static_cast<std::size_t>(k)])) f = k;
      keys.emplace_back(c, f);
    }
    CHECK(keys.size() == scene.objects.size());
    CHECK(std::is_sorted(keys.begin(), keys.end()));

    const auto tri = generate_trimodal(3);
    const auto t = text_only_example(tri, vocab);
    CHECK(t.answer == vocab.encode(tri.verbalized));
    CHECK(t.input.front() == vocab.id(tone_word(tri.tone_positive)));
  }

  TEST_CASE("derive_seed separates streams and indices") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t stream = 0; stream < 4; ++stream)
      for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(derive_seed(7, stream, i));
    CHECK(seen.size() == 4000);
  }
}
