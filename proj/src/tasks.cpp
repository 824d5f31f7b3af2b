// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptfuse/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

namespace promptfuse {

const char* form_word(Form f) {
  switch (f) {
    case Form::kSquare: return "square";
    case Form::kCircle: return "circle";
    case Form::kTriangle: return "triangle";
  }
  return "?";
}

const char* color_word(Color c) {
  switch (c) {
    case Color::kRed: return "red";
    case Color::kGreen: return "green";
    case Color::kBlue: return "blue";
    case Color::kYellow: return "yellow";
  }
  return "?";
}

std::array<float, 3> color_rgb(Color c) {
  switch (c) {
    case Color::kRed: return {1.0f, 0.0f, 0.0f};
    case Color::kGreen: return {0.0f, 1.0f, 0.0f};
    case Color::kBlue: return {0.0f, 0.0f, 1.0f};
    case Color::kYellow: return {1.0f, 1.0f, 0.0f};
  }
  return {0.0f, 0.0f, 0.0f};
}

std::vector<std::pair<int, int>> form_cells(Form f) {
  switch (f) {
    case Form::kSquare: return {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
    case Form::kTriangle: return {{0, 0}, {1, 0}, {1, 1}};
    case Form::kCircle: return {{0, 0}, {1, 1}};
  }
  return {};
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
  // splitmix64 over a mix of the three inputs
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1) + 0xbf58476d1ce4e5b9ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

int max_objects_for_grid(int grid) {
  const int per_axis = (grid + 1) / 2;
  return per_axis * per_axis;
}

RawImage render_scene(const std::vector<SceneObject>& objects, int grid) {
  const auto side = static_cast<std::size_t>(grid * 2);
  RawImage img = RawImage::black(side, side);
  for (const auto& obj : objects) {
    const auto rgb = color_rgb(obj.color);
    for (auto [dr, dc] : form_cells(obj.form)) {
      const auto r = static_cast<std::size_t>(obj.row * 2 + dr);
      const auto c = static_cast<std::size_t>(obj.col * 2 + dc);
      for (std::size_t ch = 0; ch < 3; ++ch) img.at(r, c, ch) = rgb[ch];
    }
  }
  return img;
}

Scene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  if (spec.grid <= 0 || spec.min_objects < 0 || spec.max_objects < spec.min_objects) {
    fail(ErrorCategory::kInfeasible, "invalid scene spec");
  }
  if (spec.max_objects > spec.grid * spec.grid) {
    fail(ErrorCategory::kInfeasible, "object count exceeds cell count");
  }
  if (spec.max_objects > max_objects_for_grid(spec.grid)) {
    fail(ErrorCategory::kInfeasible,
         "cannot place " + std::to_string(spec.max_objects) + " non-adjacent objects on a " +
             std::to_string(spec.grid) + "x" + std::to_string(spec.grid) + " grid");
  }
  std::mt19937_64 rng(seed);
  const int count = std::uniform_int_distribution<int>(spec.min_objects, spec.max_objects)(rng);
  std::vector<int> cells(static_cast<std::size_t>(spec.grid * spec.grid));
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);

  std::vector<std::pair<int, int>> placed;
  for (int attempt = 0;; ++attempt) {
    if (attempt == 1000) fail(ErrorCategory::kInfeasible, "scene placement did not converge");
    std::shuffle(cells.begin(), cells.end(), rng);
    placed.clear();
    for (int cell : cells) {
      if (static_cast<int>(placed.size()) == count) break;
      const int r = cell / spec.grid, c = cell % spec.grid;
      bool ok = true;
      for (auto [pr, pc] : placed) {
        if (std::abs(pr - r) <= 1 && std::abs(pc - c) <= 1) ok = false;
      }
      if (ok) placed.emplace_back(r, c);
    }
    if (static_cast<int>(placed.size()) == count) break;
  }
  std::sort(placed.begin(), placed.end());

  Scene scene;
  scene.grid = spec.grid;
  scene.seed = seed;
  std::uniform_int_distribution<int> form_dist(0, 2), color_dist(0, 3);
  for (auto [r, c] : placed) {
    scene.objects.push_back(SceneObject{kForms[static_cast<std::size_t>(form_dist(rng))],
                                        kColors[static_cast<std::size_t>(color_dist(rng))], r, c});
  }
  scene.image = render_scene(scene.objects, spec.grid);
  return scene;
}

const char* question_type_name(QuestionType t) {
  switch (t) {
    case QuestionType::kNumber: return "Number";
    case QuestionType::kYesNo: return "YesNo";
    case QuestionType::kOther: return "Other";
  }
  return "?";
}

QASample generate_qa(const Scene& scene, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::map<Form, int> form_count;
  std::set<std::pair<Color, Form>> present;
  for (const auto& o : scene.objects) {
    ++form_count[o.form];
    present.emplace(o.color, o.form);
  }
  std::vector<Form> unique_forms;
  for (Form f : kForms)
    if (form_count[f] == 1) unique_forms.push_back(f);

  QASample s;
  s.scene = scene;
  s.seed = seed;
  int type = std::uniform_int_distribution<int>(0, 2)(rng);
  if (type == 2 && unique_forms.empty()) type = std::uniform_int_distribution<int>(0, 1)(rng);

  if (type == 0) {
    Form f;
    std::vector<Form> present_forms;
    for (Form pf : kForms)
      if (form_count[pf] > 0) present_forms.push_back(pf);
    if (!present_forms.empty() && std::uniform_real_distribution<double>(0, 1)(rng) < 0.75) {
      f = present_forms[std::uniform_int_distribution<std::size_t>(0, present_forms.size() - 1)(rng)];
    } else {
      f = kForms[std::uniform_int_distribution<std::size_t>(0, 2)(rng)];
    }
    s.type = QuestionType::kNumber;
    s.question = {"how", "many", form_word(f), "?"};
    s.answer = {std::to_string(form_count[f])};
  } else if (type == 1) {
    std::pair<Color, Form> target;
    const bool ask_present = !present.empty() && std::uniform_real_distribution<double>(0, 1)(rng) < 0.5;
    if (ask_present) {
      std::vector<std::pair<Color, Form>> pv(present.begin(), present.end());
      target = pv[std::uniform_int_distribution<std::size_t>(0, pv.size() - 1)(rng)];
    } else {
      std::vector<std::pair<Color, Form>> absent;
      for (Color c : kColors)
        for (Form f : kForms)
          if (!present.count({c, f})) absent.emplace_back(c, f);
      target = absent[std::uniform_int_distribution<std::size_t>(0, absent.size() - 1)(rng)];
    }
    s.type = QuestionType::kYesNo;
    s.question = {"is", "there", "a", color_word(target.first), form_word(target.second), "?"};
    s.answer = {present.count(target) ? "yes" : "no"};
  } else {
    const Form f = unique_forms[std::uniform_int_distribution<std::size_t>(0, unique_forms.size() - 1)(rng)];
    Color c = Color::kRed;
    for (const auto& o : scene.objects)
      if (o.form == f) c = o.color;
    s.type = QuestionType::kOther;
    s.question = {"what", "color", "is", "the", form_word(f), "?"};
    s.answer = {color_word(c)};
  }
  return s;
}

std::vector<std::string> describe_scene(const Scene& scene) {
  std::vector<std::string> words;
  for (const auto& o : scene.objects) {
    words.emplace_back(color_word(o.color));
    words.emplace_back(form_word(o.form));
  }
  return words;
}

const std::vector<std::vector<std::string>>& positive_utterances() {
  static const std::vector<std::vector<std::string>> u = {
      {"i", "love", "this"},          {"what", "a", "great", "day"}, {"this", "is", "wonderful"},
      {"you", "are", "so", "kind"},   {"best", "party", "ever"},
  };
  return u;
}

const std::vector<std::vector<std::string>>& negative_utterances() {
  static const std::vector<std::vector<std::string>> u = {
      {"i", "hate", "this"},          {"what", "a", "terrible", "day"}, {"this", "is", "awful"},
      {"you", "are", "so", "rude"},   {"worst", "party", "ever"},
  };
  return u;
}

const char* tone_word(bool positive) { return positive ? "happy" : "sad"; }

namespace {

// Face glyph on an 8x8 frame: two eyes and a smiling or frowning mouth.
std::vector<std::pair<int, int>> face_pixels(bool happy) {
  std::vector<std::pair<int, int>> px = {{1, 2}, {1, 5}};
  if (happy) {
    for (auto p : {std::pair{4, 1}, {5, 2}, {5, 3}, {5, 4}, {5, 5}, {4, 6}}) px.push_back(p);
  } else {
    for (auto p : {std::pair{5, 1}, {4, 2}, {4, 3}, {4, 4}, {4, 5}, {5, 6}}) px.push_back(p);
  }
  return px;
}

}  // namespace

TrimodalSample generate_trimodal(std::uint64_t seed, const TrimodalSpec& spec) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  TrimodalSample s;
  s.seed = seed;
  s.text_positive = unit(rng) < 0.5f;
  s.tone_positive = unit(rng) < 0.5f;
  s.label = s.text_positive != s.tone_positive;
  s.verbalized = s.label ? "True" : "False";

  const auto& pool = s.text_positive ? positive_utterances() : negative_utterances();
  s.utterance = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];

  std::normal_distribution<float> frame_noise(0.0f, spec.frame_noise);
  const int frames = std::uniform_int_distribution<int>(spec.min_frames, spec.max_frames)(rng);
  for (int f = 0; f < frames; ++f) {
    RawImage img = RawImage::black();
    const int dr = std::uniform_int_distribution<int>(0, 1)(rng);
    const int dc = std::uniform_int_distribution<int>(-1, 1)(rng);
    const float brightness = 0.6f + 0.4f * unit(rng);
    for (auto [r, c] : face_pixels(s.tone_positive)) {
      const auto rr = static_cast<std::size_t>(r + dr);
      const auto cc = static_cast<std::size_t>(c + dc);
      for (std::size_t ch = 0; ch < 3; ++ch) img.at(rr, cc, ch) = brightness;
    }
    for (float& p : img.pixels) p = std::clamp(p + frame_noise(rng), 0.0f, 1.0f);
    s.frames.push_back(std::move(img));
  }

  const auto& band = s.tone_positive ? kPositiveToneCycles : kNegativeToneCycles;
  std::normal_distribution<float> audio_noise(0.0f, spec.audio_noise);
  const int windows = std::uniform_int_distribution<int>(spec.min_windows, spec.max_windows)(rng);
  for (int w = 0; w < windows; ++w) {
    const int cycles = band[std::uniform_int_distribution<std::size_t>(0, band.size() - 1)(rng)];
    const float phase = unit(rng) * 2.0f * std::numbers::pi_v<float>;
    const float amp = 0.5f + 0.5f * unit(rng);
    std::vector<float> wave(spec.window_length);
    for (std::size_t n = 0; n < wave.size(); ++n) {
      const float t = static_cast<float>(n) / static_cast<float>(wave.size());
      wave[n] = amp * std::sin(2.0f * std::numbers::pi_v<float> * static_cast<float>(cycles) * t + phase) +
                audio_noise(rng);
    }
    s.audio_windows.push_back(std::move(wave));
  }
  return s;
}

const Vocab& lab_vocabulary() {
  static const Vocab vocab = [] {
    std::vector<std::string> words = {"0", "1", "2", "3", "4"};
    for (Form f : kForms) words.emplace_back(form_word(f));
    for (Color c : kColors) words.emplace_back(color_word(c));
    for (const char* w : {"how", "many", "is", "there", "a", "what", "color", "the", "?", "yes", "no",
                          "happy", "sad", "True", "False"}) {
      words.emplace_back(w);
    }
    std::set<std::string> seen(words.begin(), words.end());
    for (const auto* pool : {&positive_utterances(), &negative_utterances()}) {
      for (const auto& u : *pool)
        for (const auto& w : u)
          if (seen.insert(w).second) words.push_back(w);
    }
    for (const char* w : {"question", ":", "caption"})
      if (seen.insert(w).second) words.emplace_back(w);
    words.emplace_back("<scene>");
    for (Color c : kColors)
      for (Form f : kForms) words.push_back(std::string(color_word(c)) + "-" + form_word(f));
    return Vocab(words);
  }();
  return vocab;
}

std::vector<std::string> scene_summary_tokens(const Scene& scene) {
  std::vector<std::string> out{"<scene>"};
  for (const auto& o : scene.objects) out.push_back(std::string(color_word(o.color)) + "-" + form_word(o.form));
  return out;
}

std::vector<std::string> scene_caption(const Scene& scene) {
  std::vector<SceneObject> objects = scene.objects;
  std::sort(objects.begin(), objects.end(), [](const SceneObject& a, const SceneObject& b) {
    return std::pair(a.color, a.form) < std::pair(b.color, b.form);
  });
  std::vector<std::string> words;
  for (const auto& o : objects) {
    words.emplace_back(color_word(o.color));
    words.emplace_back(form_word(o.form));
  }
  return words;
}

std::vector<std::string> instruction_words(PretrainTask task) {
  return task == PretrainTask::kAnswer ? std::vector<std::string>{"question", ":"}
                                       : std::vector<std::string>{"caption", ":"};
}

TextExample text_only_example(const QASample& sample, const Vocab& vocab, SceneRendering rendering,
                              PretrainTask task) {
  TextExample ex;
  if (rendering == SceneRendering::kSummary) {
    for (const auto& w : scene_summary_tokens(sample.scene)) ex.summary.push_back(vocab.id(w));
  } else {
    for (const auto& w : describe_scene(sample.scene)) ex.input.push_back(vocab.id(w));
  }
  for (const auto& w : instruction_words(task)) ex.input.push_back(vocab.id(w));
  for (const auto& w : sample.question) ex.input.push_back(vocab.id(w));
  if (task == PretrainTask::kAnswer) {
    for (const auto& w : sample.answer) ex.answer.push_back(vocab.id(w));
    ex.kind = question_type_name(sample.type);
  } else {
    for (const auto& w : scene_caption(sample.scene)) ex.answer.push_back(vocab.id(w));
    ex.kind = "Caption";
  }
  return ex;
}

TextExample text_only_example(const TrimodalSample& sample, const Vocab& vocab, PretrainTask task) {
  TextExample ex;
  const int tone = vocab.id(tone_word(sample.tone_positive));
  ex.input = {tone, tone};
  for (const auto& w : instruction_words(task)) ex.input.push_back(vocab.id(w));
  for (const auto& w : sample.utterance) ex.input.push_back(vocab.id(w));
  if (task == PretrainTask::kAnswer) {
    ex.answer = {vocab.id(sample.verbalized)};
    ex.kind = "Trimodal";
  } else {
    ex.answer = {tone};
    ex.kind = "Caption";
  }
  return ex;
}

void AnswerHistogram::add(const std::string& type, const std::string& answer) {
  ++by_type[type][answer];
  ++total;
}

std::string AnswerHistogram::majority_answer() const {
  std::map<std::string, std::size_t> overall;
  for (const auto& [_, answers] : by_type)
    for (const auto& [a, n] : answers) overall[a] += n;
  std::string best;
  std::size_t best_n = 0;
  for (const auto& [a, n] : overall) {
    if (n > best_n) {
      best = a;
      best_n = n;
    }
  }
  return best;
}

double AnswerHistogram::majority_share() const {
  if (total == 0) return 0.0;
  const std::string best = majority_answer();
  std::size_t n = 0;
  for (const auto& [_, answers] : by_type) {
    if (auto it = answers.find(best); it != answers.end()) n += it->second;
  }
  return static_cast<double>(n) / static_cast<double>(total);
}

AnswerHistogram histogram(const std::vector<QASample>& samples) {
  AnswerHistogram h;
  for (const auto& s : samples) h.add(question_type_name(s.type), s.answer.front());
  return h;
}

AnswerHistogram histogram(const std::vector<TrimodalSample>& samples) {
  AnswerHistogram h;
  for (const auto& s : samples) h.add("Trimodal", s.verbalized);
  return h;
}

namespace {

constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kEvalStream = 2;

template <typename Make>
auto build(const SplitSizes& sizes, std::uint64_t seed, Make make) {
  using Sample = decltype(make(std::uint64_t{}));
  Splits<Sample> out;
  std::set<std::uint64_t> train_seeds;
  for (std::size_t i = 0; i < sizes.train; ++i) {
    const std::uint64_t s = derive_seed(seed, kTrainStream, i);
    train_seeds.insert(s);
    out.train.push_back(make(s));
  }
  std::uint64_t index = 0;
  while (out.eval.size() < sizes.eval) {
    const std::uint64_t s = derive_seed(seed, kEvalStream, index++);
    if (train_seeds.count(s)) continue;
    out.eval.push_back(make(s));
  }
  out.train_histogram = histogram(out.train);
  out.eval_histogram = histogram(out.eval);
  return out;
}

}  // namespace

Splits<QASample> build_qa_splits(const SplitSizes& sizes, std::uint64_t seed, const SceneSpec& spec) {
  return build(sizes, seed, [&](std::uint64_t s) {
    return generate_qa(generate_scene(s, spec), derive_seed(s, 7, 0));
  });
}

Splits<TrimodalSample> build_trimodal_splits(const SplitSizes& sizes, std::uint64_t seed,
                                             const TrimodalSpec& spec) {
  return build(sizes, seed, [&](std::uint64_t s) { return generate_trimodal(s, spec); });
}

}  // namespace promptfuse
