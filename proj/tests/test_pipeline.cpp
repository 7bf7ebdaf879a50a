#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "longtail/common.hpp"
#include "longtail/pipeline.hpp"

using namespace longtail;
using namespace longtail::pipeline;
using nlohmann::json;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Small but complete configuration: every stage produces real artifacts in
// well under a second.
PipelineConfig mini_config(const std::string& workdir) {
  PipelineConfig cfg;
  cfg.workdir = workdir;
  cfg.n_products = 80;
  cfg.n_queries = 60;
  cfg.vocab_size = 40;
  cfg.sft_epochs = 3;
  cfg.sft_batch_size = 8;
  cfg.embed_dim = 8;
  cfg.hidden_dim = 12;
  cfg.beam_width = 3;
  cfg.max_rewrite_len = 4;
  cfg.align_queries = 25;
  cfg.align_epochs = 2;
  cfg.align_batch_size = 4;
  return cfg;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("defaults survive the json round-trip") {
    PipelineConfig def = default_config();
    CHECK(def.workdir == "run");
    CHECK(def.n_products == 300);
    CHECK(def.n_queries == 600);
    CHECK(def.tau_prime == 0.5);
    CHECK(def.objective == "rele");
    CHECK(def.contrast_number == 4);
    CHECK(def.sft_all_candidates);

    const std::string text = config_to_json(def);
    PipelineConfig back = config_from_json_text(text, {});
    CHECK(config_to_json(back) == text);
    CHECK(config_hash(back) == config_hash(def));
  }

  TEST_CASE("file values load and overrides win") {
    PipelineConfig cfg = config_from_json_text(
        R"({"n_products": 50, "scorer": "jaccard", "lambda": 0.5})",
        std::vector<std::string>{"n_products=70", "seed=9"});
    CHECK(cfg.n_products == 70);  // the override beats the file
    CHECK(cfg.scorer == "jaccard");
    CHECK(cfg.lambda == 0.5);
    CHECK(cfg.seed == 9);
    CHECK(cfg.n_queries == 600);  // untouched fields keep their defaults
  }

  TEST_CASE("config parsing rejects malformed input") {
    CHECK_THROWS_AS(config_from_json_text("{\"frobnicate\": 1}", {}), ValidationError);
    CHECK_THROWS_WITH(config_from_json_text("{\"frobnicate\": 1}", {}),
                      "unknown config key \"frobnicate\"");
    CHECK_THROWS_WITH(config_from_json_text("[1,2]", {}), "config must be a JSON object");
    CHECK_THROWS_AS(config_from_json_text("not json", {}), ValidationError);
    CHECK_THROWS_WITH(config_from_json_text("{}", std::vector<std::string>{"n_products"}),
                      "override \"n_products\" is not of the form key=value");
    CHECK_THROWS_WITH(config_from_json_text("{}", std::vector<std::string>{"bogus=1"}),
                      "unknown config key \"bogus\"");
    CHECK_THROWS_WITH(config_from_json_text("{}", std::vector<std::string>{"n_products=abc"}),
                      "cannot parse value \"abc\" for config key \"n_products\"");
    CHECK_THROWS_WITH(load_config("/nonexistent/config.json", {}),
                      "config file does not exist: /nonexistent/config.json");
  }

  TEST_CASE("range validation") {
    auto expect_invalid = [](auto mutate, const char* msg) {
      PipelineConfig cfg = default_config();
      mutate(cfg);
      CHECK_THROWS_WITH(validate(cfg), msg);
    };
    expect_invalid([](PipelineConfig& c) { c.contrast_number = 1; },
                   "contrast_number must lie in [2, 5]");
    expect_invalid([](PipelineConfig& c) { c.contrast_number = 6; },
                   "contrast_number must lie in [2, 5]");
    expect_invalid([](PipelineConfig& c) { c.tau_prime = 1.5; },
                   "tau_prime must lie in [0, 1]");
    expect_invalid([](PipelineConfig& c) { c.tau_incr = 0.0; }, "tau_incr must be positive");
    expect_invalid([](PipelineConfig& c) { c.n_products = 0; }, "n_products must be at least 1");
    expect_invalid([](PipelineConfig& c) { c.scorer = "bm25"; }, "unknown scorer \"bm25\"");
    expect_invalid([](PipelineConfig& c) { c.match_mode = "xor"; },
                   "unknown match mode \"xor\"");
    expect_invalid([](PipelineConfig& c) { c.objective = "ctr"; }, "unknown objective \"ctr\"");
    expect_invalid([](PipelineConfig& c) { c.tie_epsilon = 0.0; },
                   "tie_epsilon must be positive");
    expect_invalid([](PipelineConfig& c) { c.workdir.clear(); }, "workdir must be non-empty");
    CHECK_NOTHROW(validate(default_config()));
  }

  TEST_CASE("config hash ignores the workdir and tracks real fields") {
    PipelineConfig a = default_config();
    PipelineConfig b = default_config();
    b.workdir = "/somewhere/else";
    CHECK(config_hash(a) == config_hash(b));
    b.n_queries += 1;
    CHECK(config_hash(a) != config_hash(b));
  }

  TEST_CASE("stage catalog") {
    CHECK(std::size(kStages) == 10);
    CHECK(stage_inputs("gen-world", default_config()).empty());
    auto eval_inputs = stage_inputs("eval", default_config());
    CHECK(!eval_inputs.empty());
    CHECK_THROWS_AS(stage_inputs("deploy", default_config()), ValidationError);
    CHECK_THROWS_AS(stage_outputs("deploy", default_config()), ValidationError);
    auto outs = stage_outputs("gen-world", default_config());
    CHECK(std::find(outs.begin(), outs.end(), "products.jsonl") != outs.end());
  }

  TEST_CASE("exit codes distinguish validation from missing inputs") {
    auto dir = fresh_dir("longtail_pipe_codes");
    PipelineConfig cfg = mini_config(dir.string());

    std::string err;
    CHECK(run_stage_exit_code("eval", cfg, &err) == 2);
    CHECK(err.find("requires") != std::string::npos);
    CHECK(err.find("run \"") != std::string::npos);  // names the producing stage

    PipelineConfig bad = cfg;
    bad.contrast_number = 9;
    CHECK(run_stage_exit_code("gen-world", bad, &err) == 1);
    CHECK(err == "contrast_number must lie in [2, 5]");

    CHECK(run_stage_exit_code("not-a-stage", cfg, &err) == 1);
    CHECK(err == "unknown stage \"not-a-stage\"");

    std::filesystem::remove_all(dir);
  }

  TEST_CASE("report renderings") {
    feedback::EvalReport report;
    report.top = {4, 0.75, 2, 1.5, 0, 0.0};
    report.tail = {2, 0.25, 0, 0.0, 1, 0.5};
    report.all = {6, 0.5833, 2, 1.5, 1, 0.5};
    // torso stays empty

    CHECK(report_fields() ==
          std::vector<std::string>{"count", "mean_rele", "incr_valid_count", "mean_incr",
                                   "hitrate_valid_count", "mean_hitrate"});

    json j = json::parse(report_to_json(report));
    REQUIRE(j.contains("segments"));
    CHECK(j["segments"]["top"]["count"] == 4);
    CHECK(j["segments"]["top"]["mean_rele"] == 0.75);
    CHECK(j["segments"]["top"]["mean_incr"] == 1.5);
    CHECK(j["segments"]["top"]["mean_hitrate"].is_null());  // no valid queries
    CHECK(j["segments"]["torso"]["count"] == 0);
    CHECK(j["segments"]["torso"]["mean_rele"].is_null());
    CHECK(j["segments"]["tail"]["mean_hitrate"] == 0.5);

    const std::string text = report_to_text(report);
    CHECK(text.find("segment") != std::string::npos);
    CHECK(text.find("top") != std::string::npos);
    CHECK(text.find("0.7500") != std::string::npos);
    CHECK(text.find("-") != std::string::npos);  // undefined cells render as dashes

    auto dir = fresh_dir("longtail_pipe_report");
    emit_report(report, (dir / "report.json").string(), (dir / "report.txt").string());
    CHECK(read_file((dir / "report.json").string()) == report_to_json(report));
    CHECK(read_file((dir / "report.txt").string()) == report_to_text(report));
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("the full stage chain runs and leaves a coherent manifest") {
    auto dir = fresh_dir("longtail_pipe_chain");
    PipelineConfig cfg = mini_config(dir.string());

    for (const char* stage : kStages) {
      std::string err;
      const int code = run_stage_exit_code(stage, cfg, &err);
      const std::string note = std::string(stage) + ": " + err;
      INFO(note);
      REQUIRE(code == 0);
    }

    for (const char* artifact :
         {"products.jsonl", "logs.jsonl", "eval.jsonl", "index.meta.json", "dataset.jsonl",
          "vocab.txt", "model_sft.ckpt", "sft_trace.jsonl", "candidates.jsonl", "scored.jsonl",
          "align_data.jsonl", "model_align.ckpt", "align_trace.jsonl", "rewrite_table.jsonl",
          "serve_results.jsonl", "report.json", "report.txt", "manifest.json"})
      CHECK(file_exists((dir / artifact).string()));

    json manifest = json::parse(read_file((dir / "manifest.json").string()));
    REQUIRE(manifest.contains("stages"));
    for (const char* stage : kStages) {
      REQUIRE(manifest["stages"].contains(stage));
      const auto& entry = manifest["stages"][stage];
      CHECK(entry.contains("completed_at"));
      CHECK(entry.contains("duration_ms"));
      CHECK(entry["config_hash"] == hex64(config_hash(cfg)));
      CHECK(entry.contains("inputs"));
      CHECK(entry.contains("outputs"));
    }

    // Dataset counters shrink monotonically through the rejection chain.
    REQUIRE(manifest.contains("dataset_stats"));
    const auto& stats = manifest["dataset_stats"];
    const int n_initial = stats["n_initial"];
    const int n_rele = stats["n_after_rele"];
    const int n_incr = stats["n_after_incr"];
    CHECK(n_initial >= n_rele);
    CHECK(n_rele >= n_incr);
    CHECK(n_incr >= 0);
    CHECK(stats["n_total"].get<int>() > 0);

    // Candidate rows: at most beam_width distinct texts per query.
    std::map<std::string, std::set<std::string>> per_query;
    for (const auto& line : read_lines((dir / "candidates.jsonl").string())) {
      if (line.empty()) continue;
      json row = json::parse(line);
      const auto [it, fresh] = per_query[row["query"].get<std::string>()].insert(
          row["candidate"].get<std::string>());
      CHECK(fresh);  // no duplicate candidate for one query
    }
    CHECK(!per_query.empty());
    for (const auto& [q, cands] : per_query)
      CHECK(cands.size() <= static_cast<size_t>(cfg.beam_width));

    // The eval report parses and covers every eval record.
    json report = json::parse(read_file((dir / "report.json").string()));
    const int top = report["segments"]["top"]["count"];
    const int torso = report["segments"]["torso"]["count"];
    const int tail = report["segments"]["tail"]["count"];
    CHECK(report["segments"]["all"]["count"] == top + torso + tail);
    CHECK(top + torso + tail > 0);

    std::filesystem::remove_all(dir);
  }

  TEST_CASE("a stale index is rejected with a validation error") {
    auto dir = fresh_dir("longtail_pipe_stale");
    PipelineConfig cfg = mini_config(dir.string());
    REQUIRE(run_stage_exit_code("gen-world", cfg) == 0);
    REQUIRE(run_stage_exit_code("build-index", cfg) == 0);

    // Regenerate the world with another seed; the index metadata now refers
    // to products that no longer exist.
    PipelineConfig moved = cfg;
    moved.seed = cfg.seed + 1;
    REQUIRE(run_stage_exit_code("gen-world", moved) == 0);

    std::string err;
    CHECK(run_stage_exit_code("build-dataset", moved, &err) == 1);
    CHECK(err == "index metadata does not match products.jsonl; rerun build-index");
    std::filesystem::remove_all(dir);
  }
}
