#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "longtail/pipeline.hpp"

namespace {

const char* stage_blurb(const std::string& stage) {
  if (stage == "gen-world") return "generate the synthetic catalog, logs, and annotations";
  if (stage == "build-index") return "build the inverted index metadata over the catalog";
  if (stage == "build-dataset") return "run the rejection filters and mix the instruction dataset";
  if (stage == "train-sft") return "fit the vocabulary and train the supervised model";
  if (stage == "gen-candidates") return "beam-decode rewrite candidates for long-tail queries";
  if (stage == "score-feedback") return "score candidates offline and rank them per query";
  if (stage == "train-align") return "train the ranking-aligned model on scored candidates";
  if (stage == "build-table") return "batch-infer rewrites into the serving table";
  if (stage == "serve") return "replay held-out queries through the lookup + union path";
  return "score held-out queries per segment and emit the report";
}

int run_one(const std::string& stage, const longtail::pipeline::PipelineConfig& cfg) {
  std::string error;
  const int rc = longtail::pipeline::run_stage_exit_code(stage, cfg, &error);
  if (rc != 0) {
    std::fprintf(stderr, "%s: %s\n", stage.c_str(), error.c_str());
    return rc;
  }
  std::printf("%s: ok\n", stage.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"long-tail query rewriting pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string workdir;
  app.add_option("--config", config_path, "JSON configuration file; defaults apply without it");
  app.add_option("--set", overrides, "key=value override, repeatable; wins over the file");
  app.add_option("--workdir", workdir, "working directory (shorthand for --set workdir=...)");

  std::string chosen;
  for (const char* stage : longtail::pipeline::kStages) {
    CLI::App* sub = app.add_subcommand(stage, stage_blurb(stage));
    sub->callback([&chosen, stage] { chosen = stage; });
  }
  app.add_subcommand("run-all", "run every stage in order")->callback([&chosen] {
    chosen = "run-all";
  });
  app.add_subcommand("print-config", "print the effective configuration and exit")
      ->callback([&chosen] { chosen = "print-config"; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  longtail::pipeline::PipelineConfig cfg;
  try {
    if (!workdir.empty()) overrides.push_back("workdir=" + workdir);
    cfg = longtail::pipeline::load_config(config_path, overrides);
  } catch (const longtail::pipeline::ValidationError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }

  if (chosen == "print-config") {
    std::fputs(longtail::pipeline::config_to_json(cfg).c_str(), stdout);
    return 0;
  }
  if (chosen == "run-all") {
    for (const char* stage : longtail::pipeline::kStages) {
      const int rc = run_one(stage, cfg);
      if (rc != 0) return rc;
    }
    return 0;
  }
  return run_one(chosen, cfg);
}
