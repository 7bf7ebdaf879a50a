#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "longtail/corpus.hpp"
#include "longtail/feedback.hpp"

namespace longtail::datasetgen {

enum class Task { kRewrite, kQuality, kTitle, kCot };

Task parse_task(std::string_view name);
std::string_view task_name(Task task);

struct PromptExample {
  std::string prompt;
  std::string response;
  Task task = Task::kRewrite;
};

// Versioned template constants. Rendering substitutes fields literally; the
// parse_* functions are the inverse for fields free of newlines and of the
// literal field labels.
std::string render_quality_prompt(std::string_view query, std::string_view rewrite);
std::string render_title_prompt(std::string_view query);
std::string render_cot_prompt(std::string_view query);
// Embeds the query and at most k_titles interacted titles, most recent first.
std::string render_rewrite_prompt(std::string_view query,
                                  std::span<const std::string> interacted_titles, int k_titles);
// "{thought}; {rewrite}". Throws when the thought itself contains the
// semicolon separator, which would make the split ambiguous.
std::string render_cot_response(std::string_view thought, std::string_view rewrite);

struct QualityFields {
  std::string query;
  std::string rewrite;
};
std::optional<QualityFields> parse_quality_prompt(std::string_view prompt);
std::optional<std::string> parse_title_prompt(std::string_view prompt);
std::optional<std::string> parse_cot_prompt(std::string_view prompt);
struct RewriteFields {
  std::string query;
  std::vector<std::string> titles;
};
std::optional<RewriteFields> parse_rewrite_prompt(std::string_view prompt);
struct CotParts {
  std::string thought;
  std::string rewrite;
};
std::optional<CotParts> split_cot_response(std::string_view response);

// A (query, top legacy rewrite) pair flowing through the rejection filters,
// with scores filled in as the filters run.
struct RewritePair {
  std::string query;
  std::string rewrite;
  std::vector<std::string> interacted_titles;  // carried from the source record
  double rele = 0.0;
  bool rele_scored = false;
  feedback::MaybeScore incr;
};

struct InitialDataset {
  std::vector<RewritePair> pairs;
  // Records with no legacy rewrite, or whose query/rewrite tokenizes empty.
  int skipped = 0;
};

// One pair per record, taking the top-ranked legacy rewrite as gold standard.
InitialDataset build_initial_dataset(std::span<const corpus::QueryLogRecord> logs);

// Keeps pairs with rele strictly above tau_rele.
std::vector<RewritePair> filter_relevance(const corpus::Catalog& catalog,
                                          const feedback::InvertedIndex& index,
                                          std::vector<RewritePair> pairs,
                                          const feedback::RelevanceConfig& cfg, double tau_rele);

struct IncrementFiltered {
  std::vector<RewritePair> pairs;
  // Rewrite-task examples for the survivors; prompts embed the query plus
  // interacted titles.
  std::vector<PromptExample> examples;
};

// Keeps pairs with a defined incr strictly above tau_incr.
IncrementFiltered filter_increment(const corpus::Catalog& catalog,
                                   const feedback::InvertedIndex& index,
                                   std::vector<RewritePair> pairs,
                                   const feedback::RetrievalSet& excellent,
                                   const feedback::RelevanceConfig& cfg, double tau_incr,
                                   int k_titles);

std::vector<PromptExample> build_aux_quality(std::span<const corpus::QualityAnnotation> rows);
std::vector<PromptExample> build_aux_title(
    std::span<const std::pair<std::string, std::string>> query_title_pairs);
std::vector<PromptExample> build_aux_cot(std::span<const corpus::CotAnnotation> rows);

// Concatenates the groups and applies one seeded permutation.
std::vector<PromptExample> mix_and_shuffle(
    const std::vector<std::vector<PromptExample>>& groups, uint64_t seed);

struct DatasetStats {
  int n_initial = 0;
  int n_skipped = 0;
  int n_after_rele = 0;
  int n_after_incr = 0;
  int n_quality = 0;
  int n_title = 0;
  int n_cot = 0;
  int n_total = 0;
};

void save_dataset(const std::string& path, std::span<const PromptExample> examples);
std::vector<PromptExample> load_dataset(const std::string& path);

}  // namespace longtail::datasetgen
