#include "longtail/feedback.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "longtail/common.hpp"

namespace longtail::feedback {

using nlohmann::json;

double token_overlap_score(std::string_view query, std::string_view title) {
  const corpus::TokenList qtoks = corpus::tokenize(query);
  if (qtoks.empty())
    throw std::invalid_argument("EmptyQuery: scorer given a query with no tokens");
  const corpus::TokenList ttoks = corpus::tokenize(title);
  const std::set<std::string> qset(qtoks.begin(), qtoks.end());
  const std::set<std::string> tset(ttoks.begin(), ttoks.end());
  size_t hit = 0;
  for (const std::string& t : qset)
    if (tset.count(t)) ++hit;
  return static_cast<double>(hit) / static_cast<double>(qset.size());
}

double jaccard_score(std::string_view query, std::string_view title) {
  const corpus::TokenList qtoks = corpus::tokenize(query);
  if (qtoks.empty())
    throw std::invalid_argument("EmptyQuery: scorer given a query with no tokens");
  const corpus::TokenList ttoks = corpus::tokenize(title);
  const std::set<std::string> qset(qtoks.begin(), qtoks.end());
  const std::set<std::string> tset(ttoks.begin(), ttoks.end());
  size_t inter = 0;
  for (const std::string& t : qset)
    if (tset.count(t)) ++inter;
  const size_t uni = qset.size() + tset.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

RelevanceScorer make_scorer(const std::string& name) {
  if (name == "token_overlap") return token_overlap_score;
  if (name == "jaccard") return jaccard_score;
  throw std::invalid_argument("unknown scorer \"" + name + "\"");
}

std::vector<std::string> scorer_names() { return {"token_overlap", "jaccard"}; }

int count_relevant(const corpus::Catalog& catalog, std::string_view query,
                   const RetrievalSet& set, const RelevanceScorer& scorer, double tau_prime) {
  int n = 0;
  for (const std::string& id : set.ids)
    if (scorer(query, catalog.title_of(id)) > tau_prime) ++n;
  return n;
}

double rele_from_sets(const corpus::Catalog& catalog, std::string_view query,
                      const RetrievalSet& z_y, const RelevanceScorer& scorer, double tau_prime) {
  if (z_y.empty()) return 0.0;
  const int relevant = count_relevant(catalog, query, z_y, scorer, tau_prime);
  return static_cast<double>(relevant) / static_cast<double>(z_y.size());
}

MaybeScore incr_from_sets(const corpus::Catalog& catalog, std::string_view query,
                          const RetrievalSet& z_x, const RetrievalSet& z_y,
                          const RetrievalSet& excellent, const RelevanceScorer& scorer,
                          double tau_prime) {
  const RetrievalSet denom_set = lexindex::set_intersection(excellent, z_x);
  const int denom = count_relevant(catalog, query, denom_set, scorer, tau_prime);
  if (denom == 0) return MaybeScore{};  // UndefinedIncrement
  const RetrievalSet numer_set =
      lexindex::set_intersection(excellent, lexindex::set_union(z_x, z_y));
  const int numer = count_relevant(catalog, query, numer_set, scorer, tau_prime);
  return MaybeScore{static_cast<double>(numer) / static_cast<double>(denom), true};
}

MaybeScore hitrate_from_sets(const corpus::Catalog& catalog, std::string_view query,
                             const RetrievalSet& z_x, const RetrievalSet& z_y,
                             const RetrievalSet& transactions, const RelevanceScorer& scorer,
                             double tau_prime) {
  const int denom = count_relevant(catalog, query, transactions, scorer, tau_prime);
  if (denom == 0) return MaybeScore{};  // UndefinedHitrate
  const RetrievalSet hit =
      lexindex::set_intersection(transactions, lexindex::set_union(z_x, z_y));
  return MaybeScore{static_cast<double>(hit.size()) / static_cast<double>(denom), true};
}

namespace {

RetrievalSet retrieve_or_empty(const InvertedIndex& index, std::string_view text,
                               lexindex::MatchMode mode) {
  return lexindex::retrieve(index, text, mode);
}

}  // namespace

double rele(const corpus::Catalog& catalog, const InvertedIndex& index, std::string_view query,
            std::string_view rewrite, const RelevanceConfig& cfg) {
  const RelevanceScorer scorer = make_scorer(cfg.scorer);
  const RetrievalSet z_y = retrieve_or_empty(index, rewrite, cfg.match_mode);
  return rele_from_sets(catalog, query, z_y, scorer, cfg.tau_prime);
}

MaybeScore incr(const corpus::Catalog& catalog, const InvertedIndex& index,
                std::string_view query, std::string_view rewrite, const RetrievalSet& excellent,
                const RelevanceConfig& cfg) {
  const RelevanceScorer scorer = make_scorer(cfg.scorer);
  const RetrievalSet z_x = retrieve_or_empty(index, query, cfg.match_mode);
  const RetrievalSet z_y = retrieve_or_empty(index, rewrite, cfg.match_mode);
  return incr_from_sets(catalog, query, z_x, z_y, excellent, scorer, cfg.tau_prime);
}

MaybeScore hitrate(const corpus::Catalog& catalog, const InvertedIndex& index,
                   std::string_view query, std::string_view rewrite,
                   const RetrievalSet& transactions, const RelevanceConfig& cfg) {
  const RelevanceScorer scorer = make_scorer(cfg.scorer);
  const RetrievalSet z_x = retrieve_or_empty(index, query, cfg.match_mode);
  const RetrievalSet z_y = retrieve_or_empty(index, rewrite, cfg.match_mode);
  return hitrate_from_sets(catalog, query, z_x, z_y, transactions, scorer, cfg.tau_prime);
}

FeedbackScores score_pair(const corpus::Catalog& catalog, const InvertedIndex& index,
                          std::string_view query, std::string_view rewrite,
                          const RetrievalSet& excellent, const RetrievalSet& transactions,
                          const RelevanceConfig& cfg) {
  const RelevanceScorer scorer = make_scorer(cfg.scorer);
  const RetrievalSet z_x = retrieve_or_empty(index, query, cfg.match_mode);
  const RetrievalSet z_y = retrieve_or_empty(index, rewrite, cfg.match_mode);
  FeedbackScores out;
  out.rele = rele_from_sets(catalog, query, z_y, scorer, cfg.tau_prime);
  out.incr = incr_from_sets(catalog, query, z_x, z_y, excellent, scorer, cfg.tau_prime);
  out.hitrate = hitrate_from_sets(catalog, query, z_x, z_y, transactions, scorer, cfg.tau_prime);
  return out;
}

Objective parse_objective(std::string_view name) {
  if (name == "rele") return Objective::kRele;
  if (name == "incr") return Objective::kIncr;
  if (name == "hitrate") return Objective::kHitrate;
  throw std::invalid_argument("unknown objective \"" + std::string(name) + "\"");
}

std::string_view objective_name(Objective objective) {
  switch (objective) {
    case Objective::kRele: return "rele";
    case Objective::kIncr: return "incr";
    case Objective::kHitrate: return "hitrate";
  }
  return "rele";
}

void rank_entries(std::vector<RankedCandidate>& entries) {
  std::sort(entries.begin(), entries.end(),
            [](const RankedCandidate& a, const RankedCandidate& b) {
              if (a.reward != b.reward) return a.reward > b.reward;
              return a.rewrite < b.rewrite;
            });
}

RankedCandidates score_candidates(const corpus::Catalog& catalog, const InvertedIndex& index,
                                  std::string_view query, std::span<const std::string> candidates,
                                  Objective objective, const RetrievalSet& excellent,
                                  const RetrievalSet& transactions, const RelevanceConfig& cfg) {
  RankedCandidates out;
  out.query = std::string(query);
  out.objective = objective;

  std::set<std::string> seen;
  for (const std::string& cand : candidates) {
    if (!seen.insert(cand).second) continue;
    if (corpus::tokenize(cand).empty()) {
      out.dropped.push_back(cand);
      continue;
    }
    const FeedbackScores s = score_pair(catalog, index, query, cand, excellent, transactions, cfg);
    double reward = 0.0;
    bool valid = true;
    switch (objective) {
      case Objective::kRele:
        reward = s.rele;
        break;
      case Objective::kIncr:
        reward = s.incr.value;
        valid = s.incr.valid;
        break;
      case Objective::kHitrate:
        reward = s.hitrate.value;
        valid = s.hitrate.valid;
        break;
    }
    if (!valid) {
      out.dropped.push_back(cand);
      continue;
    }
    out.entries.push_back(RankedCandidate{cand, reward});
  }
  if (out.entries.empty())
    throw std::runtime_error("NoScorableCandidates: every candidate for \"" + out.query +
                             "\" had an undefined " + std::string(objective_name(objective)));
  rank_entries(out.entries);
  return out;
}

std::vector<ScoredRow> flatten(std::span<const RankedCandidates> lists) {
  std::vector<ScoredRow> rows;
  for (const RankedCandidates& list : lists) {
    for (const RankedCandidate& c : list.entries)
      rows.push_back(ScoredRow{list.query, c.rewrite, list.objective, c.reward, true});
    for (const std::string& c : list.dropped)
      rows.push_back(ScoredRow{list.query, c, list.objective, 0.0, false});
  }
  return rows;
}

void save_scored(const std::string& path, std::span<const ScoredRow> rows) {
  std::ostringstream out;
  for (const ScoredRow& r : rows) {
    json j;
    j["query"] = r.query;
    j["rewrite"] = r.rewrite;
    j["objective"] = std::string(objective_name(r.objective));
    j["reward"] = r.reward;
    j["valid"] = r.valid;
    out << j.dump() << "\n";
  }
  write_file_atomic(path, out.str());
}

std::vector<ScoredRow> load_scored(const std::string& path) {
  const auto lines = read_lines(path);
  std::vector<ScoredRow> rows;
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("parse error at " + path + ":" + std::to_string(i + 1) + ": " +
                               e.what());
    }
    if (!j.is_object())
      throw std::runtime_error("record at " + path + ":" + std::to_string(i + 1) +
                               " is not an object");
    for (const auto& item : j.items()) {
      static const std::set<std::string> allowed = {"query", "rewrite", "objective", "reward",
                                                    "valid"};
      if (!allowed.count(item.key()))
        throw std::runtime_error("unknown field \"" + item.key() + "\" at " + path + ":" +
                                 std::to_string(i + 1));
    }
    ScoredRow r;
    r.query = j.at("query").get<std::string>();
    r.rewrite = j.at("rewrite").get<std::string>();
    r.objective = parse_objective(j.at("objective").get<std::string>());
    r.reward = j.at("reward").get<double>();
    r.valid = j.at("valid").get<bool>();
    rows.push_back(std::move(r));
  }
  return rows;
}

EvalReport evaluate_report(const corpus::Catalog& catalog, const InvertedIndex& index,
                           const std::map<std::string, std::string>& rewrites,
                           std::span<const corpus::QueryLogRecord> eval_records,
                           const RetrievalSet& excellent, const RelevanceConfig& cfg) {
  const RelevanceScorer scorer = make_scorer(cfg.scorer);
  EvalReport report;

  struct Acc {
    double rele_sum = 0.0;
    double incr_sum = 0.0;
    double hitrate_sum = 0.0;
    SegmentRow row;
  };
  Acc top, torso, tail, all;

  for (const corpus::QueryLogRecord& rec : eval_records) {
    const auto seg = lexindex::segment_query(catalog, index, rec.query, scorer, cfg.tau_prime,
                                             cfg.match_mode);
    auto it = rewrites.find(corpus::canonicalize(rec.query));
    const std::string& rewrite = it == rewrites.end() ? rec.query : it->second;
    const RetrievalSet transactions = lexindex::make_set(rec.transactions);
    const FeedbackScores s =
        score_pair(catalog, index, rec.query, rewrite, excellent, transactions, cfg);

    auto update = [&](Acc& acc) {
      acc.row.count += 1;
      acc.rele_sum += s.rele;
      if (s.incr.valid) {
        acc.row.incr_valid_count += 1;
        acc.incr_sum += s.incr.value;
      }
      if (s.hitrate.valid) {
        acc.row.hitrate_valid_count += 1;
        acc.hitrate_sum += s.hitrate.value;
      }
    };
    update(all);
    switch (seg) {
      case lexindex::QuerySegment::kTop: update(top); break;
      case lexindex::QuerySegment::kTorso: update(torso); break;
      case lexindex::QuerySegment::kTail: update(tail); break;
    }
  }

  auto finish = [](Acc& acc) {
    if (acc.row.count > 0) acc.row.mean_rele = acc.rele_sum / acc.row.count;
    if (acc.row.incr_valid_count > 0) acc.row.mean_incr = acc.incr_sum / acc.row.incr_valid_count;
    if (acc.row.hitrate_valid_count > 0)
      acc.row.mean_hitrate = acc.hitrate_sum / acc.row.hitrate_valid_count;
    return acc.row;
  };
  report.top = finish(top);
  report.torso = finish(torso);
  report.tail = finish(tail);
  report.all = finish(all);
  return report;
}

}  // namespace longtail::feedback
