#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "longtail/alignment.hpp"

namespace longtail::serving {

struct TableStats {
  int64_t n_queries_seen = 0;
  int64_t n_eligible = 0;  // relevant fraction below the coverage boundary
  int64_t n_covered = 0;   // eligible and holding a non-identity rewrite
};

struct RewriteTable {
  // Canonicalized query -> rewrite.
  std::map<std::string, std::string> entries;
  std::string built_at;        // ISO-8601 UTC
  std::string model_hash;      // checkpoint fingerprint
  TableStats stats;
};

struct BuildTableConfig {
  int beam_width = 5;
  int max_len = 8;
  int k_titles = 1;
  int max_prompt_tokens = 64;
  lexindex::MatchMode match_mode = lexindex::MatchMode::kAnd;
};

// Every distinct query whose own retrieval has a relevant fraction below
// lexindex::kTopBoundary lands in the table under its canonical form. The
// stored value is the best beam candidate with non-empty text differing from
// the canonical query; when the beam offers none, the canonical query itself
// is stored and the entry counts as uncovered.
RewriteTable build_rewrite_table(const model::ModelParams& params,
                                 const model::Vocabulary& vocab,
                                 std::span<const corpus::QueryLogRecord> queries,
                                 const corpus::Catalog& catalog,
                                 const lexindex::InvertedIndex& index,
                                 const lexindex::RelevanceScorer& scorer, double tau_prime,
                                 const BuildTableConfig& cfg, std::string model_hash);

// Exact match after canonicalization.
std::optional<std::string> lookup(const RewriteTable& table, std::string_view query);

struct ServeResult {
  std::string query;
  bool covered = false;
  std::optional<std::string> used_rewrite;
  lexindex::RetrievalSet candidates;
};

// Covered queries retrieve the union of the original and rewritten queries;
// uncovered queries fall back to the original retrieval alone.
ServeResult serve_retrieve(const lexindex::InvertedIndex& index, const RewriteTable& table,
                           std::string_view query,
                           lexindex::MatchMode mode = lexindex::MatchMode::kAnd);

// Header record carrying metadata, then {query, rewrite} rows sorted by query.
// save(load(save(x))) is byte-identical.
void save_table(const std::string& path, const RewriteTable& table);
RewriteTable load_table(const std::string& path);

}  // namespace longtail::serving
