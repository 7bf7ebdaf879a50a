#include "longtail/datasetgen.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "longtail/common.hpp"
#include "longtail/rng.hpp"

namespace longtail::datasetgen {

using nlohmann::json;

namespace {

// Template v1 constants. Responses for the quality task are the capitalized
// "Yes"/"No"; the CoT response is "{thought}; {rewrite}".
constexpr std::string_view kQualityHeader = "Is this a good e-commerce query rewrite?\nQuery: ";
constexpr std::string_view kQualityRewriteLabel = "\nRewrite: ";
constexpr std::string_view kTitleHeader =
    "Please generate product titles that match input query\nQuery: ";
constexpr std::string_view kCotHeader =
    "Your task is to rewrite the input query into a query that makes it easier to search for "
    "related products, and you are required to give the thought process and then the query "
    "rewriting result. The thought process and the query rewriting result are separated by a "
    "semicolon.\nQuery: ";
constexpr std::string_view kRewriteHeader =
    "Please rewrite the input query into a query that makes it easier to search for related "
    "products\nQuery: ";
constexpr std::string_view kRewriteTitlesLabel = "\nRecent products: ";
constexpr std::string_view kTitleJoiner = " | ";

bool consume_prefix(std::string_view& text, std::string_view prefix) {
  if (text.substr(0, prefix.size()) != prefix) return false;
  text.remove_prefix(prefix.size());
  return true;
}

}  // namespace

Task parse_task(std::string_view name) {
  if (name == "rewrite") return Task::kRewrite;
  if (name == "quality") return Task::kQuality;
  if (name == "title") return Task::kTitle;
  if (name == "cot") return Task::kCot;
  throw std::invalid_argument("unknown task \"" + std::string(name) + "\"");
}

std::string_view task_name(Task task) {
  switch (task) {
    case Task::kRewrite: return "rewrite";
    case Task::kQuality: return "quality";
    case Task::kTitle: return "title";
    case Task::kCot: return "cot";
  }
  return "rewrite";
}

std::string render_quality_prompt(std::string_view query, std::string_view rewrite) {
  std::string out;
  out.append(kQualityHeader);
  out.append(query);
  out.append(kQualityRewriteLabel);
  out.append(rewrite);
  return out;
}

std::string render_title_prompt(std::string_view query) {
  std::string out;
  out.append(kTitleHeader);
  out.append(query);
  return out;
}

std::string render_cot_prompt(std::string_view query) {
  std::string out;
  out.append(kCotHeader);
  out.append(query);
  return out;
}

std::string render_rewrite_prompt(std::string_view query,
                                  std::span<const std::string> interacted_titles, int k_titles) {
  std::string out;
  out.append(kRewriteHeader);
  out.append(query);
  const size_t n = std::min<size_t>(interacted_titles.size(),
                                    k_titles > 0 ? static_cast<size_t>(k_titles) : 0);
  if (n > 0) {
    out.append(kRewriteTitlesLabel);
    for (size_t i = 0; i < n; ++i) {
      if (i) out.append(kTitleJoiner);
      out.append(interacted_titles[i]);
    }
  }
  return out;
}

std::string render_cot_response(std::string_view thought, std::string_view rewrite) {
  if (thought.find(';') != std::string_view::npos)
    throw std::invalid_argument("AmbiguousSeparator: thought contains a semicolon: \"" +
                                std::string(thought) + "\"");
  std::string out;
  out.append(thought);
  out.append("; ");
  out.append(rewrite);
  return out;
}

std::optional<QualityFields> parse_quality_prompt(std::string_view prompt) {
  if (!consume_prefix(prompt, kQualityHeader)) return std::nullopt;
  const size_t split = prompt.find(kQualityRewriteLabel);
  if (split == std::string_view::npos) return std::nullopt;
  QualityFields out;
  out.query = std::string(prompt.substr(0, split));
  out.rewrite = std::string(prompt.substr(split + kQualityRewriteLabel.size()));
  return out;
}

std::optional<std::string> parse_title_prompt(std::string_view prompt) {
  if (!consume_prefix(prompt, kTitleHeader)) return std::nullopt;
  return std::string(prompt);
}

std::optional<std::string> parse_cot_prompt(std::string_view prompt) {
  if (!consume_prefix(prompt, kCotHeader)) return std::nullopt;
  return std::string(prompt);
}

std::optional<RewriteFields> parse_rewrite_prompt(std::string_view prompt) {
  if (!consume_prefix(prompt, kRewriteHeader)) return std::nullopt;
  RewriteFields out;
  const size_t split = prompt.find(kRewriteTitlesLabel);
  if (split == std::string_view::npos) {
    out.query = std::string(prompt);
    return out;
  }
  out.query = std::string(prompt.substr(0, split));
  std::string_view rest = prompt.substr(split + kRewriteTitlesLabel.size());
  while (!rest.empty()) {
    const size_t next = rest.find(kTitleJoiner);
    if (next == std::string_view::npos) {
      out.titles.emplace_back(rest);
      break;
    }
    out.titles.emplace_back(rest.substr(0, next));
    rest.remove_prefix(next + kTitleJoiner.size());
  }
  return out;
}

std::optional<CotParts> split_cot_response(std::string_view response) {
  const size_t split = response.find(';');
  if (split == std::string_view::npos) return std::nullopt;
  CotParts out;
  out.thought = std::string(response.substr(0, split));
  std::string_view rest = response.substr(split + 1);
  if (!rest.empty() && rest.front() == ' ') rest.remove_prefix(1);
  out.rewrite = std::string(rest);
  return out;
}

InitialDataset build_initial_dataset(std::span<const corpus::QueryLogRecord> logs) {
  InitialDataset out;
  for (const corpus::QueryLogRecord& rec : logs) {
    if (rec.legacy_rewrites.empty()) {
      out.skipped += 1;
      continue;
    }
    const std::string& rewrite = rec.legacy_rewrites.front();
    if (corpus::tokenize(rec.query).empty() || corpus::tokenize(rewrite).empty()) {
      out.skipped += 1;
      continue;
    }
    RewritePair pair;
    pair.query = rec.query;
    pair.rewrite = rewrite;
    pair.interacted_titles = rec.interacted_titles;
    out.pairs.push_back(std::move(pair));
  }
  return out;
}

std::vector<RewritePair> filter_relevance(const corpus::Catalog& catalog,
                                          const feedback::InvertedIndex& index,
                                          std::vector<RewritePair> pairs,
                                          const feedback::RelevanceConfig& cfg, double tau_rele) {
  std::vector<RewritePair> kept;
  for (RewritePair& pair : pairs) {
    pair.rele = feedback::rele(catalog, index, pair.query, pair.rewrite, cfg);
    pair.rele_scored = true;
    if (pair.rele > tau_rele) kept.push_back(std::move(pair));
  }
  return kept;
}

IncrementFiltered filter_increment(const corpus::Catalog& catalog,
                                   const feedback::InvertedIndex& index,
                                   std::vector<RewritePair> pairs,
                                   const feedback::RetrievalSet& excellent,
                                   const feedback::RelevanceConfig& cfg, double tau_incr,
                                   int k_titles) {
  IncrementFiltered out;
  for (RewritePair& pair : pairs) {
    pair.incr = feedback::incr(catalog, index, pair.query, pair.rewrite, excellent, cfg);
    if (!pair.incr.valid || pair.incr.value <= tau_incr) continue;
    PromptExample ex;
    ex.prompt = render_rewrite_prompt(pair.query, pair.interacted_titles, k_titles);
    ex.response = pair.rewrite;
    ex.task = Task::kRewrite;
    out.examples.push_back(std::move(ex));
    out.pairs.push_back(std::move(pair));
  }
  return out;
}

std::vector<PromptExample> build_aux_quality(std::span<const corpus::QualityAnnotation> rows) {
  std::vector<PromptExample> out;
  for (const corpus::QualityAnnotation& row : rows) {
    if (row.label != "yes" && row.label != "no")
      throw std::invalid_argument("quality label must be \"yes\" or \"no\", got \"" + row.label +
                                  "\"");
    PromptExample ex;
    ex.prompt = render_quality_prompt(row.query, row.rewrite);
    ex.response = row.label == "yes" ? "Yes" : "No";
    ex.task = Task::kQuality;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<PromptExample> build_aux_title(
    std::span<const std::pair<std::string, std::string>> query_title_pairs) {
  std::vector<PromptExample> out;
  for (const auto& [query, title] : query_title_pairs) {
    PromptExample ex;
    ex.prompt = render_title_prompt(query);
    ex.response = title;
    ex.task = Task::kTitle;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<PromptExample> build_aux_cot(std::span<const corpus::CotAnnotation> rows) {
  std::vector<PromptExample> out;
  for (const corpus::CotAnnotation& row : rows) {
    PromptExample ex;
    ex.prompt = render_cot_prompt(row.query);
    ex.response = render_cot_response(row.thought, row.rewrite);
    ex.task = Task::kCot;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<PromptExample> mix_and_shuffle(
    const std::vector<std::vector<PromptExample>>& groups, uint64_t seed) {
  std::vector<PromptExample> out;
  for (const auto& g : groups) out.insert(out.end(), g.begin(), g.end());
  Rng rng(seed);
  rng.shuffle(out);
  return out;
}

void save_dataset(const std::string& path, std::span<const PromptExample> examples) {
  std::ostringstream out;
  for (const PromptExample& ex : examples) {
    json j;
    j["prompt"] = ex.prompt;
    j["response"] = ex.response;
    j["task"] = std::string(task_name(ex.task));
    out << j.dump() << "\n";
  }
  write_file_atomic(path, out.str());
}

std::vector<PromptExample> load_dataset(const std::string& path) {
  const auto lines = read_lines(path);
  std::vector<PromptExample> examples;
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
      static const std::set<std::string> allowed = {"prompt", "response", "task"};
      if (!allowed.count(item.key()))
        throw std::runtime_error("unknown field \"" + item.key() + "\" at " + path + ":" +
                                 std::to_string(i + 1));
    }
    PromptExample ex;
    ex.prompt = j.at("prompt").get<std::string>();
    ex.response = j.at("response").get<std::string>();
    ex.task = parse_task(j.at("task").get<std::string>());
    examples.push_back(std::move(ex));
  }
  return examples;
}

}  // namespace longtail::datasetgen
