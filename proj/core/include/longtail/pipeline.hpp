#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "longtail/serving.hpp"

namespace longtail::pipeline {

// Raised for config and input validation failures (exit code 1).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Raised when a stage's declared input artifact is absent (exit code 2).
struct MissingPrerequisite : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Every field has a default; a config file may override any subset and
// unknown keys are rejected. Flag overrides are applied on top of the file.
struct PipelineConfig {
  std::string workdir = "run";

  // world
  uint64_t seed = 7;
  int n_products = 300;
  int n_queries = 600;
  int vocab_size = 60;
  double excellent_fraction = 0.3;
  double empty_rewrite_fraction = 0.1;
  int n_eval_queries = 0;

  // retrieval and feedback
  double tau_prime = 0.5;
  std::string scorer = "token_overlap";
  std::string match_mode = "and";
  std::string objective = "rele";

  // rejection thresholds
  double tau_rele = 0.6;
  double tau_incr = 1.2;

  // dataset
  int k_titles = 1;
  double aux_ratio = 0.12;
  int max_prompt_tokens_rewrite = 64;
  int max_prompt_tokens_other = 256;

  // model
  int embed_dim = 16;
  int hidden_dim = 32;
  int min_count = 1;

  // supervised stage
  double sft_lr = 0.01;
  int sft_epochs = 24;
  int sft_batch_size = 8;

  // candidate generation
  int beam_width = 5;
  int max_rewrite_len = 6;
  int align_queries = 150;

  // alignment stage
  double lambda = 1.0;
  double align_lr = 0.005;
  int align_epochs = 8;
  int align_batch_size = 4;
  int contrast_number = 4;
  double tie_epsilon = 1e-6;
  bool sft_all_candidates = true;
  std::string temperature_source = "feedback";

  // serving
  std::string table_checkpoint = "model_align.ckpt";
};

PipelineConfig default_config();
// Parses the config file (JSON object, unknown keys rejected), then applies
// key=value overrides; overrides win. Validates ranges.
PipelineConfig load_config(const std::string& path, std::span<const std::string> overrides);
PipelineConfig config_from_json_text(const std::string& text,
                                     std::span<const std::string> overrides);
std::string config_to_json(const PipelineConfig& cfg);
void validate(const PipelineConfig& cfg);
uint64_t config_hash(const PipelineConfig& cfg);

inline constexpr const char* kStages[] = {
    "gen-world",   "build-index",    "build-dataset", "train-sft", "gen-candidates",
    "score-feedback", "train-align", "build-table",   "serve",     "eval",
};

// Declared input artifacts, relative to the workdir. Running a stage whose
// inputs are missing raises MissingPrerequisite naming the artifact.
std::vector<std::string> stage_inputs(const std::string& stage, const PipelineConfig& cfg);
std::vector<std::string> stage_outputs(const std::string& stage, const PipelineConfig& cfg);

// Runs one stage against the workdir and updates the run manifest. Throws
// ValidationError / MissingPrerequisite / std::runtime_error.
void run_stage(const std::string& stage, const PipelineConfig& cfg);

// Exit-code contract: 0 success, 1 validation, 2 missing prerequisite,
// 3 runtime failure.
int run_stage_exit_code(const std::string& stage, const PipelineConfig& cfg,
                        std::string* error_out = nullptr);

// Field list published for the machine-readable eval report.
std::vector<std::string> report_fields();
std::string report_to_json(const feedback::EvalReport& report);
std::string report_to_text(const feedback::EvalReport& report);
// Writes report.json and report.txt renderings of the same report.
void emit_report(const feedback::EvalReport& report, const std::string& json_path,
                 const std::string& text_path);

}  // namespace longtail::pipeline
