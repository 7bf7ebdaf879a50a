#pragma once

#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "longtail/corpus.hpp"

namespace longtail::lexindex {

// Conjunctive matching is the default; disjunctive matching exists for
// experiments.
enum class MatchMode { kAnd, kOr };

MatchMode parse_match_mode(std::string_view name);
std::string_view match_mode_name(MatchMode mode);

// Sorted unique product ids.
struct RetrievalSet {
  std::vector<std::string> ids;

  size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool contains(std::string_view id) const;
  bool operator==(const RetrievalSet&) const = default;
};

RetrievalSet make_set(std::vector<std::string> ids);
RetrievalSet set_union(const RetrievalSet& a, const RetrievalSet& b);
RetrievalSet set_intersection(const RetrievalSet& a, const RetrievalSet& b);

class InvertedIndex {
 public:
  explicit InvertedIndex(const corpus::Catalog& catalog);

  size_t catalog_size() const { return catalog_size_; }
  // Sorted ids of products whose title contains the term; null when unseen.
  const std::vector<std::string>* postings(std::string_view term) const;
  const std::map<std::string, std::vector<std::string>>& terms() const { return postings_; }

  // term\tid id id... lines for inspection; not a stability contract.
  std::string dump() const;

 private:
  std::map<std::string, std::vector<std::string>> postings_;
  size_t catalog_size_ = 0;
};

InvertedIndex build_index(const corpus::Catalog& catalog);

// Query-title relevance scorer; implementations live in the feedback module.
using RelevanceScorer = std::function<double(std::string_view query, std::string_view title)>;

// Tokenizes the text and matches postings. kAnd intersects (every token must
// appear in the title), kOr unites. Throws on text that tokenizes empty.
RetrievalSet retrieve(const InvertedIndex& index, std::string_view text,
                      MatchMode mode = MatchMode::kAnd);

// retrieve(query) united with retrieve(rewrite).
RetrievalSet retrieve_union(const InvertedIndex& index, std::string_view query,
                            std::string_view rewrite, MatchMode mode = MatchMode::kAnd);

// Fraction of the set whose title scores above tau_prime against the query;
// 0 when the set is empty.
double relevant_fraction(const corpus::Catalog& catalog, std::string_view query,
                         const RetrievalSet& set, const RelevanceScorer& scorer,
                         double tau_prime);

// Segment boundaries over a query's own retrieval. Fractions above kTopBoundary
// are Top, fractions below kTailBoundary are Tail, both boundaries land in
// Torso. Serving reuses kTopBoundary as its coverage rule.
inline constexpr double kTopBoundary = 0.7;
inline constexpr double kTailBoundary = 0.1;

enum class QuerySegment { kTop, kTorso, kTail };

std::string_view segment_name(QuerySegment segment);

QuerySegment segment_query(const corpus::Catalog& catalog, const InvertedIndex& index,
                           std::string_view query, const RelevanceScorer& scorer,
                           double tau_prime, MatchMode mode = MatchMode::kAnd);

}  // namespace longtail::lexindex
