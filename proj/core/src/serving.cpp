#include "longtail/serving.hpp"

#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "longtail/common.hpp"

namespace longtail::serving {

using nlohmann::json;

RewriteTable build_rewrite_table(const model::ModelParams& params,
                                 const model::Vocabulary& vocab,
                                 std::span<const corpus::QueryLogRecord> queries,
                                 const corpus::Catalog& catalog,
                                 const lexindex::InvertedIndex& index,
                                 const lexindex::RelevanceScorer& scorer, double tau_prime,
                                 const BuildTableConfig& cfg, std::string model_hash) {
  RewriteTable table;
  table.built_at = utc_timestamp();
  table.model_hash = std::move(model_hash);

  std::set<std::string> seen;
  for (const corpus::QueryLogRecord& rec : queries) {
    const std::string canon = corpus::canonicalize(rec.query);
    if (canon.empty()) continue;
    if (!seen.insert(canon).second) continue;
    table.stats.n_queries_seen += 1;

    const lexindex::RetrievalSet own = lexindex::retrieve(index, rec.query, cfg.match_mode);
    const double fraction = lexindex::relevant_fraction(catalog, rec.query, own, scorer, tau_prime);
    if (fraction >= lexindex::kTopBoundary) continue;
    table.stats.n_eligible += 1;

    const std::string prompt =
        datasetgen::render_rewrite_prompt(rec.query, rec.interacted_titles, cfg.k_titles);
    const std::vector<int> prompt_ids =
        model::encode_prompt(vocab, prompt, cfg.max_prompt_tokens);
    const std::vector<model::BeamCandidate> beams =
        model::beam_search(params, vocab, prompt_ids, cfg.beam_width, cfg.max_len);

    std::string value = canon;  // identity fallback keeps the key, uncovered
    for (const model::BeamCandidate& cand : beams) {
      if (cand.text.empty() || cand.text == canon) continue;
      value = cand.text;
      table.stats.n_covered += 1;
      break;
    }
    table.entries[canon] = value;
  }
  return table;
}

std::optional<std::string> lookup(const RewriteTable& table, std::string_view query) {
  const auto it = table.entries.find(corpus::canonicalize(query));
  if (it == table.entries.end()) return std::nullopt;
  return it->second;
}

ServeResult serve_retrieve(const lexindex::InvertedIndex& index, const RewriteTable& table,
                           std::string_view query, lexindex::MatchMode mode) {
  ServeResult result;
  result.query = std::string(query);
  const lexindex::RetrievalSet own = lexindex::retrieve(index, query, mode);
  const std::optional<std::string> rewrite = lookup(table, query);
  if (rewrite) {
    result.covered = true;
    result.used_rewrite = rewrite;
    result.candidates = lexindex::set_union(own, lexindex::retrieve(index, *rewrite, mode));
  } else {
    result.candidates = own;
  }
  return result;
}

void save_table(const std::string& path, const RewriteTable& table) {
  std::ostringstream out;
  json header;
  header["built_at"] = table.built_at;
  header["model_hash"] = table.model_hash;
  header["n_covered"] = table.stats.n_covered;
  header["n_eligible"] = table.stats.n_eligible;
  header["n_queries_seen"] = table.stats.n_queries_seen;
  out << header.dump() << "\n";
  for (const auto& [query, rewrite] : table.entries) {
    json j;
    j["query"] = query;
    j["rewrite"] = rewrite;
    out << j.dump() << "\n";
  }
  write_file_atomic(path, out.str());
}

RewriteTable load_table(const std::string& path) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw std::runtime_error("empty rewrite table: " + path);

  auto parse_line = [&](size_t i) {
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
    return j;
  };

  const json header = parse_line(0);
  for (const auto& item : header.items()) {
    static const std::set<std::string> allowed = {"built_at", "model_hash", "n_covered",
                                                  "n_eligible", "n_queries_seen"};
    if (!allowed.count(item.key()))
      throw std::runtime_error("unknown field \"" + item.key() + "\" at " + path + ":1");
  }
  RewriteTable table;
  table.built_at = header.at("built_at").get<std::string>();
  table.model_hash = header.at("model_hash").get<std::string>();
  table.stats.n_covered = header.at("n_covered").get<int64_t>();
  table.stats.n_eligible = header.at("n_eligible").get<int64_t>();
  table.stats.n_queries_seen = header.at("n_queries_seen").get<int64_t>();

  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const json j = parse_line(i);
    for (const auto& item : j.items()) {
      static const std::set<std::string> allowed = {"query", "rewrite"};
      if (!allowed.count(item.key()))
        throw std::runtime_error("unknown field \"" + item.key() + "\" at " + path + ":" +
                                 std::to_string(i + 1));
    }
    const std::string query = j.at("query").get<std::string>();
    if (table.entries.count(query))
      throw std::runtime_error("duplicate table key \"" + query + "\" at " + path + ":" +
                               std::to_string(i + 1));
    table.entries[query] = j.at("rewrite").get<std::string>();
  }
  return table;
}

}  // namespace longtail::serving
