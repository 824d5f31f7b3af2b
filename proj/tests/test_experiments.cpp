// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <iterator>
#include <set>
#include <sstream>

#include "doctest.h"
#include "promptfuse/binary_io.hpp"
#include "promptfuse/experiments.hpp"
#include "test_support.hpp"

using namespace promptfuse;
using nlohmann::json;
using promptfuse::testing::TempDir;

namespace {

ErrorCategory category_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.category();
  }
  FAIL("expected an error");
  return ErrorCategory::kInvalidArgument;
}

MetricsRecord record(const std::string& id, std::uint64_t seed, const std::string& method, int n, int epoch,
                     double overall) {
  MetricsRecord r;
  r.run_id = id;
  r.seed = seed;
  r.method = method;
  r.shots = "512";
  r.prompt_length = n;
  r.epoch = epoch;
  r.loss = 0.25;
  r.scores = {{"Other", 1.0}, {"YesNo", 2.0}, {"Number", 3.0}, {"Overall", overall}};
  return r;
}

// A pipeline small enough to pretrain inside a unit test.
json tiny_pipeline_doc(const std::filesystem::path& artifacts) {
  return {
      {"task", "vqa2mod"},
      {"methods", {"PromptFuse", "BlackImage"}},
      {"shots", 8},
      {"seeds", {1, 2}},
      {"data", {{"train_pool", 24}, {"eval", 12}, {"seed", 5}}},
      {"model", {{"d_model", 16}, {"heads", 2}, {"encoder_layers", 1}, {"decoder_layers", 1}, {"ffn", 32}}},
      {"vision", {{"width", 16}, {"heads", 2}, {"ffn", 32}}},
      {"audio", {{"channels1", 8}, {"width", 16}}},
      {"plm_pretrain",
       {{"qa_examples", 64}, {"trimodal_examples", 16}, {"heldout_qa", 8}, {"heldout_trimodal", 4}, {"epochs", 1}}},
      {"encoder_pretrain", {{"epochs", 1}, {"scenes", 32}, {"frames", 16}, {"windows", 16}}},
      {"train", {{"epochs", 2}, {"batch_size", 4}}},
      {"prompt", {{"length", 2}}},
      {"sweep_prompt_lengths", {1, 2}},
      {"artifacts", artifacts.string()},
  };
}

struct TinyPipeline {
  TempDir dir{"pipeline"};
  ExperimentConfig config;
  std::optional<PretrainedComponents> components;
};

TinyPipeline& tiny_pipeline() {
  static TinyPipeline p = [] {
    TinyPipeline t;
    t.config = parse_experiment_config(tiny_pipeline_doc(t.dir.path() / "artifacts"));
    return t;
  }();
  if (!p.components) p.components.emplace(ensure_pretrained(p.config));
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PROMPTFUSE_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("cli-experiments") {
  TEST_CASE("config defaults follow the task and data regime") {
    const auto vqa = parse_experiment_config(json::object());
    CHECK(vqa.task == TaskKind::kVqa2Mod);
    CHECK(vqa.seeds == std::vector<std::uint64_t>{1, 2, 3});
    CHECK(vqa.train.epochs == 100);
    CHECK(vqa.train.batch_size == 32);
    CHECK(vqa.prompt.length == 20);
    CHECK(vqa.prompt.position == PositionMode::kBegin);
    CHECK(vqa.prompt.encoder == PromptEncoderMode::kIdentity);
    CHECK(vqa.effective_pooling() == PoolingMode::kCls);
    CHECK(vqa.shots_label() == "512");

    const auto full = parse_experiment_config({{"shots", "full"}});
    CHECK_FALSE(full.shots.has_value());
    CHECK(full.shots_label() == "full");
    CHECK(full.train.epochs == 2);

    const auto tri = parse_experiment_config({{"task", "trimodal"}});
    CHECK(tri.seeds.size() == 10);
    CHECK(tri.train.epochs == 50);
    CHECK(tri.train.batch_size == 8);
    CHECK(tri.effective_pooling() == PoolingMode::kAverage);
    CHECK(parse_experiment_config({{"task", "trimodal"}, {"shots", "full"}}).train.epochs == 5);

    // Explicit training keys win over the regime defaults.
    CHECK(parse_experiment_config({{"train", {{"epochs", 7}}}}).train.epochs == 7);
  }

  TEST_CASE("config errors") {
    CHECK(category_of([] { parse_experiment_config({{"bogus", 1}}); }) == ErrorCategory::kConfig);
    CHECK(category_of([] { parse_experiment_config({{"train", {{"lr", 1}}}}); }) == ErrorCategory::kConfig);
    CHECK(category_of([] { parse_experiment_config({{"shots", "many"}}); }) == ErrorCategory::kConfig);
    CHECK(category_of([] { parse_experiment_config({{"shots", -1}}); }) == ErrorCategory::kConfig);
    CHECK(category_of([] { parse_experiment_config({{"seeds", json::array()}}); }) == ErrorCategory::kConfig);
    CHECK(category_of([] { parse_experiment_config({{"model", {{"d_model", "wide"}}}}); }) ==
          ErrorCategory::kConfig);
    CHECK(category_of([] { parse_experiment_config({{"task", "vqa3"}}); }) == ErrorCategory::kConfig);
    CHECK_THROWS_AS(parse_experiment_config({{"methods", {"Magic"}}}), Error);
    TempDir dir("config");
    io::write_file((dir.path() / "bad.json").string(), "{ not json");
    CHECK(category_of([&] { load_experiment_config(dir.path() / "bad.json"); }) == ErrorCategory::kConfig);
  }

  TEST_CASE("config documents round-trip") {
    const auto c = parse_experiment_config(tiny_pipeline_doc("somewhere"));
    const auto again = parse_experiment_config(to_json(c));
    CHECK(to_json(again) == to_json(c));
    CHECK(plm_fingerprint(again) == plm_fingerprint(c));
    auto wider = c;
    wider.model.d_model = 32;
    CHECK(plm_fingerprint(wider) != plm_fingerprint(c));
    CHECK(fusion_fingerprint(c, FusionMethod::kPromptFuse) != fusion_fingerprint(c, FusionMethod::kBlindPrompt));
  }

  TEST_CASE("mean and sample standard deviation formatting") {
    CHECK(format_mean_std({29.0, 29.4, 29.8}) == "29.4±0.4");
    CHECK(format_mean_std({18.8}) == "18.8±0.0");
    CHECK(format_mean_std({1.0, 2.0}) == "1.5±0.7");
    CHECK_THROWS_AS(format_mean_std({}), Error);
  }

  TEST_CASE("metrics records round-trip and summarize") {
    TempDir dir("metrics");
    const std::vector<MetricsRecord> records = {
        record("a", 1, "PromptFuse", 20, 1, 10.0), record("a", 1, "PromptFuse", 20, 2, 29.0),
        record("b", 2, "PromptFuse", 20, 2, 29.4), record("c", 3, "PromptFuse", 20, 2, 29.8),
        record("d", 1, "BlackImage", 0, 2, 18.8)};
    emit_metrics(records, dir.path() / "m.jsonl", dir.path() / "s.txt");
    const auto back = read_metrics(dir.path() / "m.jsonl");
    REQUIRE(back.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
      CHECK(back[i].run_id == records[i].run_id);
      CHECK(back[i].seed == records[i].seed);
      CHECK(back[i].epoch == records[i].epoch);
      CHECK(back[i].loss == records[i].loss);
      CHECK(back[i].scores == records[i].scores);
    }
    CHECK(MetricsRecord::from_json(records[0].to_json()).scores == records[0].scores);

    const std::string summary = io::read_file((dir.path() / "s.txt").string());
    std::istringstream lines(summary);
    std::string header, pf, bi, extra;
    std::getline(lines, header);
    std::getline(lines, pf);
    std::getline(lines, bi);
    CHECK_FALSE(std::getline(lines, extra));
    CHECK(header.find("Yes/No") != std::string::npos);
    CHECK(pf.find("29.4±0.4") != std::string::npos);  // final epochs only
    CHECK(bi.find("18.8±0.0") != std::string::npos);

    const auto single = std::vector<MetricsRecord>{record("x", 1, "PromptFuse", 20, 1, 5.0)};
    emit_metrics(single, dir.path() / "one.jsonl", dir.path() / "one.txt");
    const std::string one = io::read_file((dir.path() / "one.jsonl").string());
    CHECK(std::count(one.begin(), one.end(), '\n') == 1);
    CHECK(io::read_file((dir.path() / "one.txt").string()).find("5.0±0.0") != std::string::npos);

    CHECK(category_of([&] { emit_metrics({}, dir.path() / "e.jsonl", dir.path() / "e.txt"); }) ==
          ErrorCategory::kInvalidArgument);
    io::write_file((dir.path() / "file").string(), "");
    CHECK(category_of([&] { emit_metrics(records, dir.path() / "file" / "m.jsonl", dir.path() / "s2.txt"); }) ==
          ErrorCategory::kIo);
  }

  TEST_CASE("sweep grid has one column per prompt length") {
    std::vector<MetricsRecord> records;
    const std::vector<int> lengths = {5, 10, 20, 40, 60, 80, 100};
    for (int n : lengths)
      for (std::uint64_t seed : {1, 2})
        records.push_back(record("pf" + std::to_string(n) + "-" + std::to_string(seed), seed, "PromptFuse", n, 1,
                                 static_cast<double>(n) + static_cast<double>(seed)));
    const std::string grid = sweep_grid(records, "Overall");
    std::istringstream lines(grid);
    std::string header, row;
    std::getline(lines, header);
    std::getline(lines, row);
    std::istringstream h(header), r(row);
    std::vector<std::string> cols((std::istream_iterator<std::string>(h)), std::istream_iterator<std::string>());
    std::vector<std::string> cells((std::istream_iterator<std::string>(r)), std::istream_iterator<std::string>());
    CHECK(cols == std::vector<std::string>{"N", "5", "10", "20", "40", "60", "80", "100"});
    REQUIRE(cells.size() == 8);
    CHECK(cells[1] == "6.5");
    CHECK(cells[7] == "101.5");
    CHECK_THROWS_AS(sweep_grid(records, "F-Score"), Error);
  }

  TEST_CASE("run ids name task, method, shots, prompt length and seed") {
    auto c = parse_experiment_config(json::object());
    CHECK(run_id(c, FusionMethod::kPromptFuse, 2) == "vqa2mod-PromptFuse-512-N20-s2");
    CHECK(run_id(c, FusionMethod::kBlackImage, 1) == "vqa2mod-BlackImage-512-N20-s1");
    CHECK(run_id(c, FusionMethod::kNoPrompt, 1) == "vqa2mod-NoPrompt-512-N0-s1");
    c.shots.reset();
    CHECK(run_id(c, FusionMethod::kBlindPrompt, 3) == "vqa2mod-BlindPrompt-full-N20-s3");
  }

  TEST_CASE("missing pretrained checkpoints are reported") {
    TempDir dir("missing");
    auto doc = tiny_pipeline_doc(dir.path() / "nothing-here");
    const auto c = parse_experiment_config(doc);
    CHECK(category_of([&] { load_pretrained(c); }) == ErrorCategory::kMissingCheckpoint);
  }

  TEST_CASE("tiny pipeline: three-way errors, determinism and restore") {
    auto& p = tiny_pipeline();

    // A changed model configuration refuses the stored checkpoints.
    auto other = p.config;
    other.model.ffn = 48;
    CHECK(category_of([&] { load_pretrained(other); }) == ErrorCategory::kFingerprintMismatch);

    auto too_many = p.config;
    too_many.shots = 25;
    CHECK(category_of([&] { run_experiment(too_many, *p.components, p.dir.path() / "inf"); }) ==
          ErrorCategory::kInfeasible);

    const auto first = run_experiment(p.config, *p.components, p.dir.path() / "run1");
    const auto second = run_experiment(p.config, *p.components, p.dir.path() / "run2");
    // 2 methods x 2 seeds x 2 epochs.
    CHECK(first.records.size() == 8);
    std::set<std::string> ids;
    for (const auto& r : first.records) ids.insert(r.run_id);
    CHECK(ids.size() == 4);
    for (const char* f : {"metrics.jsonl", "summary.txt"}) {
      CHECK(io::read_file((p.dir.path() / "run1" / f).string()) == io::read_file((p.dir.path() / "run2" / f).string()));
    }
    const auto ckpt = [&](const char* run) {
      return p.dir.path() / run / "checkpoints" / (run_id(p.config, FusionMethod::kPromptFuse, 1) + ".pfck");
    };
    CHECK(io::read_file(ckpt("run1").string()) == io::read_file(ckpt("run2").string()));

    // Restored runs predict what the trained run evaluated.
    const auto restored = restore_run(p.config, *p.components, FusionMethod::kPromptFuse, 1, ckpt("run1"));
    const auto data = build_task_data(p.config);
    const auto eval = evaluate(restored, data.eval, nullptr);
    const auto scores = score_columns(p.config.task, eval);
    const auto final_record = [&] {
      MetricsRecord last;
      for (const auto& r : first.records)
        if (r.run_id == run_id(p.config, FusionMethod::kPromptFuse, 1)) last = r;
      return last;
    }();
    CHECK(scores == final_record.scores);
    CHECK(category_of([&] { restore_run(p.config, *p.components, FusionMethod::kBlindPrompt, 1, ckpt("run1")); }) ==
          ErrorCategory::kFingerprintMismatch);
  }

  TEST_CASE("tiny pipeline: sweep grid") {
    auto& p = tiny_pipeline();
    auto c = p.config;
    c.methods = {FusionMethod::kPromptFuse};
    c.seeds = {1};
    const auto out = run_prompt_length_sweep(c, *p.components, p.dir.path() / "sweep");
    std::set<int> lengths;
    for (const auto& r : out.records) lengths.insert(r.prompt_length);
    CHECK(lengths == std::set<int>{1, 2});
    const std::string grid = io::read_file((p.dir.path() / "sweep" / "grid.txt").string());
    CHECK(grid.rfind("N", 0) == 0);
    CHECK(grid.find("PromptFuse") != std::string::npos);
    c.methods = {FusionMethod::kLinear};
    CHECK(category_of([&] { run_prompt_length_sweep(c, *p.components, p.dir.path() / "sweep2"); }) ==
          ErrorCategory::kConfig);
  }

  TEST_CASE("command line exit codes carry the error category") {
    TempDir dir("cli");
    CHECK(run_cli("count-params") == 0);
    CHECK(run_cli("no-such-command") == exit_code(ErrorCategory::kInvalidArgument));
    CHECK(run_cli("train --shots lots") == exit_code(ErrorCategory::kInvalidArgument));
    io::write_file((dir.path() / "c.json").string(), R"({"unknown": 1})");
    CHECK(run_cli("train --config " + (dir.path() / "c.json").string()) == exit_code(ErrorCategory::kConfig));
    io::write_file((dir.path() / "ok.json").string(),
                   json({{"artifacts", (dir.path() / "none").string()}}).dump());
    CHECK(run_cli("eval --config " + (dir.path() / "ok.json").string()) ==
          exit_code(ErrorCategory::kMissingCheckpoint));
    CHECK(run_cli("gen-data --config " + (dir.path() / "ok.json").string() + " --out " + (dir.path() / "d").string()) == 0);
    CHECK(std::filesystem::exists(dir.path() / "d" / "vqa2mod.jsonl"));
  }
}
