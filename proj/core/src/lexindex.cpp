#include "longtail/lexindex.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>

namespace longtail::lexindex {

MatchMode parse_match_mode(std::string_view name) {
  if (name == "and") return MatchMode::kAnd;
  if (name == "or") return MatchMode::kOr;
  throw std::invalid_argument("unknown match mode \"" + std::string(name) + "\"");
}

std::string_view match_mode_name(MatchMode mode) {
  return mode == MatchMode::kAnd ? "and" : "or";
}

bool RetrievalSet::contains(std::string_view id) const {
  return std::binary_search(ids.begin(), ids.end(), id);
}

RetrievalSet make_set(std::vector<std::string> ids) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return RetrievalSet{std::move(ids)};
}

RetrievalSet set_union(const RetrievalSet& a, const RetrievalSet& b) {
  RetrievalSet out;
  std::set_union(a.ids.begin(), a.ids.end(), b.ids.begin(), b.ids.end(),
                 std::back_inserter(out.ids));
  return out;
}

RetrievalSet set_intersection(const RetrievalSet& a, const RetrievalSet& b) {
  RetrievalSet out;
  std::set_intersection(a.ids.begin(), a.ids.end(), b.ids.begin(), b.ids.end(),
                        std::back_inserter(out.ids));
  return out;
}

InvertedIndex::InvertedIndex(const corpus::Catalog& catalog)
    : catalog_size_(catalog.size()) {
  for (const corpus::Product& p : catalog.products()) {
    const corpus::TokenList toks = corpus::tokenize(p.title);
    const std::set<std::string> unique(toks.begin(), toks.end());
    for (const std::string& t : unique) postings_[t].push_back(p.id);
  }
  for (auto& [term, ids] : postings_) std::sort(ids.begin(), ids.end());
}

const std::vector<std::string>* InvertedIndex::postings(std::string_view term) const {
  auto it = postings_.find(std::string(term));
  return it == postings_.end() ? nullptr : &it->second;
}

std::string InvertedIndex::dump() const {
  std::ostringstream out;
  for (const auto& [term, ids] : postings_) {
    out << term << '\t';
    for (size_t i = 0; i < ids.size(); ++i) {
      if (i) out << ' ';
      out << ids[i];
    }
    out << '\n';
  }
  return out.str();
}

InvertedIndex build_index(const corpus::Catalog& catalog) { return InvertedIndex(catalog); }

RetrievalSet retrieve(const InvertedIndex& index, std::string_view text, MatchMode mode) {
  corpus::TokenList toks = corpus::tokenize(text);
  if (toks.empty())
    throw std::invalid_argument("EmptyQuery: \"" + std::string(text) + "\" tokenizes to nothing");
  std::sort(toks.begin(), toks.end());
  toks.erase(std::unique(toks.begin(), toks.end()), toks.end());

  if (mode == MatchMode::kOr) {
    RetrievalSet acc;
    for (const std::string& t : toks) {
      const auto* ids = index.postings(t);
      if (ids) acc = set_union(acc, RetrievalSet{*ids});
    }
    return acc;
  }

  // Conjunctive: start from the rarest term's postings, intersect the rest.
  std::sort(toks.begin(), toks.end(), [&](const std::string& a, const std::string& b) {
    const auto* pa = index.postings(a);
    const auto* pb = index.postings(b);
    const size_t na = pa ? pa->size() : 0;
    const size_t nb = pb ? pb->size() : 0;
    return na != nb ? na < nb : a < b;
  });
  RetrievalSet acc;
  for (size_t i = 0; i < toks.size(); ++i) {
    const auto* ids = index.postings(toks[i]);
    if (!ids) return RetrievalSet{};
    if (i == 0) {
      acc = RetrievalSet{*ids};
    } else {
      acc = set_intersection(acc, RetrievalSet{*ids});
      if (acc.empty()) return acc;
    }
  }
  return acc;
}

RetrievalSet retrieve_union(const InvertedIndex& index, std::string_view query,
                            std::string_view rewrite, MatchMode mode) {
  return set_union(retrieve(index, query, mode), retrieve(index, rewrite, mode));
}

double relevant_fraction(const corpus::Catalog& catalog, std::string_view query,
                         const RetrievalSet& set, const RelevanceScorer& scorer,
                         double tau_prime) {
  if (set.empty()) return 0.0;
  size_t relevant = 0;
  for (const std::string& id : set.ids)
    if (scorer(query, catalog.title_of(id)) > tau_prime) ++relevant;
  return static_cast<double>(relevant) / static_cast<double>(set.size());
}

std::string_view segment_name(QuerySegment segment) {
  switch (segment) {
    case QuerySegment::kTop: return "top";
    case QuerySegment::kTorso: return "torso";
    case QuerySegment::kTail: return "tail";
  }
  return "tail";
}

QuerySegment segment_query(const corpus::Catalog& catalog, const InvertedIndex& index,
                           std::string_view query, const RelevanceScorer& scorer,
                           double tau_prime, MatchMode mode) {
  const RetrievalSet z = retrieve(index, query, mode);
  const double fraction = relevant_fraction(catalog, query, z, scorer, tau_prime);
  if (fraction > kTopBoundary) return QuerySegment::kTop;
  if (fraction >= kTailBoundary) return QuerySegment::kTorso;
  return QuerySegment::kTail;
}

}  // namespace longtail::lexindex
