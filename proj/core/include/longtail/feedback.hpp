#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "longtail/corpus.hpp"
#include "longtail/lexindex.hpp"

namespace longtail::feedback {

using lexindex::InvertedIndex;
using lexindex::RelevanceScorer;
using lexindex::RetrievalSet;

// Pluggable query-title scorer registry. "token_overlap" is the default:
// |tokens(q) ∩ tokens(title)| / |tokens(q)| with set semantics. "jaccard" is
// the symmetric alternative. Scorers throw on queries that tokenize empty.
RelevanceScorer make_scorer(const std::string& name);
std::vector<std::string> scorer_names();
double token_overlap_score(std::string_view query, std::string_view title);
double jaccard_score(std::string_view query, std::string_view title);

struct RelevanceConfig {
  double tau_prime = 0.5;
  std::string scorer = "token_overlap";
  lexindex::MatchMode match_mode = lexindex::MatchMode::kAnd;
};

// A score that may be undefined because its denominator counted zero members.
struct MaybeScore {
  double value = 0.0;
  bool valid = false;
};

struct FeedbackScores {
  double rele = 0.0;
  MaybeScore incr;
  MaybeScore hitrate;
};

// Set-level cores. The retrieval-backed entry points below resolve Z_x / Z_y
// through the index and delegate here; tests and callers holding explicit sets
// use these directly.
int count_relevant(const corpus::Catalog& catalog, std::string_view query,
                   const RetrievalSet& set, const RelevanceScorer& scorer, double tau_prime);

// Fraction of Z_y relevant to the original query; 0 when Z_y is empty.
double rele_from_sets(const corpus::Catalog& catalog, std::string_view query,
                      const RetrievalSet& z_y, const RelevanceScorer& scorer, double tau_prime);

// Relevant excellent members of Z_x ∪ Z_y over relevant excellent members of
// Z_x. Invalid when the denominator count is zero.
MaybeScore incr_from_sets(const corpus::Catalog& catalog, std::string_view query,
                          const RetrievalSet& z_x, const RetrievalSet& z_y,
                          const RetrievalSet& excellent, const RelevanceScorer& scorer,
                          double tau_prime);

// |E ∩ (Z_x ∪ Z_y)| over the count of relevant members of E. Invalid when no
// member of E is relevant. The numerator is not relevance-filtered.
MaybeScore hitrate_from_sets(const corpus::Catalog& catalog, std::string_view query,
                             const RetrievalSet& z_x, const RetrievalSet& z_y,
                             const RetrievalSet& transactions, const RelevanceScorer& scorer,
                             double tau_prime);

double rele(const corpus::Catalog& catalog, const InvertedIndex& index, std::string_view query,
            std::string_view rewrite, const RelevanceConfig& cfg);
MaybeScore incr(const corpus::Catalog& catalog, const InvertedIndex& index,
                std::string_view query, std::string_view rewrite, const RetrievalSet& excellent,
                const RelevanceConfig& cfg);
MaybeScore hitrate(const corpus::Catalog& catalog, const InvertedIndex& index,
                   std::string_view query, std::string_view rewrite,
                   const RetrievalSet& transactions, const RelevanceConfig& cfg);

FeedbackScores score_pair(const corpus::Catalog& catalog, const InvertedIndex& index,
                          std::string_view query, std::string_view rewrite,
                          const RetrievalSet& excellent, const RetrievalSet& transactions,
                          const RelevanceConfig& cfg);

enum class Objective { kRele, kIncr, kHitrate };

Objective parse_objective(std::string_view name);
std::string_view objective_name(Objective objective);

struct RankedCandidate {
  std::string rewrite;
  double reward = 0.0;
};

struct RankedCandidates {
  std::string query;
  Objective objective = Objective::kRele;
  // Reward descending; ties broken by rewrite text ascending. Strictly ordered
  // under that comparison.
  std::vector<RankedCandidate> entries;
  // Candidates whose chosen objective was undefined, in input order.
  std::vector<std::string> dropped;
};

// Sorts reward descending with deterministic lexicographic tie-breaking.
void rank_entries(std::vector<RankedCandidate>& entries);

// Scores each distinct candidate under the chosen objective, drops undefined
// ones, ranks the rest. Throws when nothing survives.
RankedCandidates score_candidates(const corpus::Catalog& catalog, const InvertedIndex& index,
                                  std::string_view query, std::span<const std::string> candidates,
                                  Objective objective, const RetrievalSet& excellent,
                                  const RetrievalSet& transactions, const RelevanceConfig& cfg);

// Scored-candidate rows as they appear in the flat file.
struct ScoredRow {
  std::string query;
  std::string rewrite;
  Objective objective = Objective::kRele;
  double reward = 0.0;
  bool valid = false;
};

std::vector<ScoredRow> flatten(std::span<const RankedCandidates> lists);
void save_scored(const std::string& path, std::span<const ScoredRow> rows);
std::vector<ScoredRow> load_scored(const std::string& path);

struct SegmentRow {
  int count = 0;
  double mean_rele = 0.0;
  int incr_valid_count = 0;
  double mean_incr = 0.0;  // over valid queries only
  int hitrate_valid_count = 0;
  double mean_hitrate = 0.0;  // over valid queries only
};

struct EvalReport {
  SegmentRow top;
  SegmentRow torso;
  SegmentRow tail;
  SegmentRow all;
};

// Scores each eval record's rewrite (identity when the table lacks the query)
// and aggregates per segment. Means over undefined scores skip those queries.
EvalReport evaluate_report(const corpus::Catalog& catalog, const InvertedIndex& index,
                           const std::map<std::string, std::string>& rewrites,
                           std::span<const corpus::QueryLogRecord> eval_records,
                           const RetrievalSet& excellent, const RelevanceConfig& cfg);

}  // namespace longtail::feedback
