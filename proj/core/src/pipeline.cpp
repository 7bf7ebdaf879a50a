#include "longtail/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>

#include <json.hpp>

#include "longtail/common.hpp"

namespace longtail::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

// One row per config field: name, kind tag, member. Keeps the JSON reader,
// the override parser, and the serializer in lockstep.
#define LONGTAIL_CONFIG_FIELDS(X)                  \
  X(workdir, Str)                                  \
  X(seed, U64)                                     \
  X(n_products, Int)                               \
  X(n_queries, Int)                                \
  X(vocab_size, Int)                               \
  X(excellent_fraction, Dbl)                       \
  X(empty_rewrite_fraction, Dbl)                   \
  X(n_eval_queries, Int)                           \
  X(tau_prime, Dbl)                                \
  X(scorer, Str)                                   \
  X(match_mode, Str)                               \
  X(objective, Str)                                \
  X(tau_rele, Dbl)                                 \
  X(tau_incr, Dbl)                                 \
  X(k_titles, Int)                                 \
  X(aux_ratio, Dbl)                                \
  X(max_prompt_tokens_rewrite, Int)                \
  X(max_prompt_tokens_other, Int)                  \
  X(embed_dim, Int)                                \
  X(hidden_dim, Int)                               \
  X(min_count, Int)                                \
  X(sft_lr, Dbl)                                   \
  X(sft_epochs, Int)                               \
  X(sft_batch_size, Int)                           \
  X(beam_width, Int)                               \
  X(max_rewrite_len, Int)                          \
  X(align_queries, Int)                            \
  X(lambda, Dbl)                                   \
  X(align_lr, Dbl)                                 \
  X(align_epochs, Int)                             \
  X(align_batch_size, Int)                         \
  X(contrast_number, Int)                          \
  X(tie_epsilon, Dbl)                              \
  X(sft_all_candidates, Bool)                      \
  X(temperature_source, Str)                       \
  X(table_checkpoint, Str)

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& want) {
  throw ValidationError("config key \"" + key + "\": expected " + want);
}

void assign_Int(int& dst, const std::string& key, const json& v) {
  if (!v.is_number_integer()) bad_value(key, "an integer");
  const int64_t x = v.get<int64_t>();
  if (x < INT32_MIN || x > INT32_MAX) bad_value(key, "an integer in range");
  dst = static_cast<int>(x);
}

void assign_U64(uint64_t& dst, const std::string& key, const json& v) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                 v.get<int64_t>() < 0))
    bad_value(key, "a nonnegative integer");
  dst = v.get<uint64_t>();
}

void assign_Dbl(double& dst, const std::string& key, const json& v) {
  if (!v.is_number()) bad_value(key, "a number");
  dst = v.get<double>();
}

void assign_Bool(bool& dst, const std::string& key, const json& v) {
  if (!v.is_boolean()) bad_value(key, "a boolean");
  dst = v.get<bool>();
}

void assign_Str(std::string& dst, const std::string& key, const json& v) {
  if (!v.is_string()) bad_value(key, "a string");
  dst = v.get<std::string>();
}

void apply_json_field(PipelineConfig& cfg, const std::string& key, const json& v) {
#define LONGTAIL_APPLY(name, kind)      \
  if (key == #name) {                   \
    assign_##kind(cfg.name, key, v);    \
    return;                             \
  }
  LONGTAIL_CONFIG_FIELDS(LONGTAIL_APPLY)
#undef LONGTAIL_APPLY
  throw ValidationError("unknown config key \"" + key + "\"");
}

json value_from_string(const std::string& key, const std::string& text, const char* kind) {
  try {
    const std::string k(kind);
    if (k == "Int" || k == "U64") {
      size_t used = 0;
      const long long x = std::stoll(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return json(x);
    }
    if (k == "Dbl") {
      size_t used = 0;
      const double x = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return json(x);
    }
    if (k == "Bool") {
      if (text == "true" || text == "1") return json(true);
      if (text == "false" || text == "0") return json(false);
      throw std::invalid_argument(text);
    }
    return json(text);
  } catch (const std::exception&) {
    throw ValidationError("cannot parse value \"" + text + "\" for config key \"" + key + "\"");
  }
}

void apply_override(PipelineConfig& cfg, const std::string& spec) {
  const size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ValidationError("override \"" + spec + "\" is not of the form key=value");
  const std::string key = spec.substr(0, eq);
  const std::string text = spec.substr(eq + 1);
#define LONGTAIL_OVERRIDE(name, kind)                                   \
  if (key == #name) {                                                   \
    apply_json_field(cfg, key, value_from_string(key, text, #kind));    \
    return;                                                             \
  }
  LONGTAIL_CONFIG_FIELDS(LONGTAIL_OVERRIDE)
#undef LONGTAIL_OVERRIDE
  throw ValidationError("unknown config key \"" + key + "\"");
}

}  // namespace

PipelineConfig default_config() { return PipelineConfig{}; }

std::string config_to_json(const PipelineConfig& cfg) {
  json j;
#define LONGTAIL_EMIT(name, kind) j[#name] = cfg.name;
  LONGTAIL_CONFIG_FIELDS(LONGTAIL_EMIT)
#undef LONGTAIL_EMIT
  return j.dump(2) + "\n";
}

PipelineConfig config_from_json_text(const std::string& text,
                                     std::span<const std::string> overrides) {
  PipelineConfig cfg;
  if (!text.empty()) {
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ValidationError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ValidationError("config must be a JSON object");
    for (const auto& item : j.items()) apply_json_field(cfg, item.key(), item.value());
  }
  for (const std::string& spec : overrides) apply_override(cfg, spec);
  validate(cfg);
  return cfg;
}

PipelineConfig load_config(const std::string& path, std::span<const std::string> overrides) {
  std::string text;
  if (!path.empty()) {
    if (!file_exists(path)) throw ValidationError("config file does not exist: " + path);
    text = read_file(path);
  }
  return config_from_json_text(text, overrides);
}

void validate(const PipelineConfig& cfg) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ValidationError(msg);
  };
  require(!cfg.workdir.empty(), "workdir must be non-empty");
  require(cfg.n_products >= 1, "n_products must be at least 1");
  require(cfg.n_queries >= 1, "n_queries must be at least 1");
  require(cfg.vocab_size >= 1, "vocab_size must be at least 1");
  require(cfg.excellent_fraction >= 0.0 && cfg.excellent_fraction <= 1.0,
          "excellent_fraction must lie in [0, 1]");
  require(cfg.empty_rewrite_fraction >= 0.0 && cfg.empty_rewrite_fraction <= 1.0,
          "empty_rewrite_fraction must lie in [0, 1]");
  require(cfg.n_eval_queries >= 0, "n_eval_queries must be nonnegative");
  require(cfg.tau_prime >= 0.0 && cfg.tau_prime <= 1.0, "tau_prime must lie in [0, 1]");
  require(cfg.tau_rele >= 0.0 && cfg.tau_rele <= 1.0, "tau_rele must lie in [0, 1]");
  require(cfg.tau_incr > 0.0, "tau_incr must be positive");
  require(cfg.k_titles >= 0, "k_titles must be nonnegative");
  require(cfg.aux_ratio >= 0.0, "aux_ratio must be nonnegative");
  require(cfg.max_prompt_tokens_rewrite >= 0, "max_prompt_tokens_rewrite must be nonnegative");
  require(cfg.max_prompt_tokens_other >= 0, "max_prompt_tokens_other must be nonnegative");
  require(cfg.embed_dim >= 1, "embed_dim must be at least 1");
  require(cfg.hidden_dim >= 1, "hidden_dim must be at least 1");
  require(cfg.min_count >= 1, "min_count must be at least 1");
  require(cfg.sft_lr > 0.0, "sft_lr must be positive");
  require(cfg.sft_epochs >= 0, "sft_epochs must be nonnegative");
  require(cfg.sft_batch_size >= 1, "sft_batch_size must be at least 1");
  require(cfg.beam_width >= 1, "beam_width must be at least 1");
  require(cfg.max_rewrite_len >= 1, "max_rewrite_len must be at least 1");
  require(cfg.align_queries >= 1, "align_queries must be at least 1");
  require(cfg.lambda >= 0.0, "lambda must be nonnegative");
  require(cfg.align_lr > 0.0, "align_lr must be positive");
  require(cfg.align_epochs >= 0, "align_epochs must be nonnegative");
  require(cfg.align_batch_size >= 1, "align_batch_size must be at least 1");
  require(cfg.contrast_number >= 2 && cfg.contrast_number <= 5,
          "contrast_number must lie in [2, 5]");
  require(cfg.tie_epsilon > 0.0, "tie_epsilon must be positive");
  require(!cfg.table_checkpoint.empty(), "table_checkpoint must be non-empty");

  try {
    feedback::make_scorer(cfg.scorer);
  } catch (const std::exception&) {
    throw ValidationError("unknown scorer \"" + cfg.scorer + "\"");
  }
  try {
    lexindex::parse_match_mode(cfg.match_mode);
  } catch (const std::exception&) {
    throw ValidationError("unknown match mode \"" + cfg.match_mode + "\"");
  }
  try {
    feedback::parse_objective(cfg.objective);
  } catch (const std::exception&) {
    throw ValidationError("unknown objective \"" + cfg.objective + "\"");
  }
  require(cfg.temperature_source == "feedback" || cfg.temperature_source == "policy",
          "temperature_source must be \"feedback\" or \"policy\"");
}

// The workdir names where a run lives, not what it computes, so it stays out
// of the hash: the same configuration in two directories is the same run.
uint64_t config_hash(const PipelineConfig& cfg) {
  json j = json::parse(config_to_json(cfg));
  j.erase("workdir");
  return fnv1a(j.dump());
}

// ---------------------------------------------------------------------------
// Stage graph

namespace {

const char* kProducts = "products.jsonl";
const char* kLogs = "logs.jsonl";
const char* kEval = "eval.jsonl";
const char* kQuality = "quality.jsonl";
const char* kCot = "cot.jsonl";
const char* kIndexMeta = "index.meta.json";
const char* kDataset = "dataset.jsonl";
const char* kVocab = "vocab.txt";
const char* kSftCkpt = "model_sft.ckpt";
const char* kSftTrace = "sft_trace.jsonl";
const char* kCandidates = "candidates.jsonl";
const char* kScored = "scored.jsonl";
const char* kAlignData = "align_data.jsonl";
const char* kAlignCkpt = "model_align.ckpt";
const char* kAlignTrace = "align_trace.jsonl";
const char* kTable = "rewrite_table.jsonl";
const char* kServeResults = "serve_results.jsonl";
const char* kReportJson = "report.json";
const char* kReportText = "report.txt";
const char* kManifest = "manifest.json";

bool known_stage(const std::string& stage) {
  for (const char* s : kStages)
    if (stage == s) return true;
  return false;
}

std::string at(const std::string& workdir, const std::string& rel) {
  return (fs::path(workdir) / rel).string();
}

}  // namespace

std::vector<std::string> stage_inputs(const std::string& stage, const PipelineConfig& cfg) {
  if (!known_stage(stage)) throw ValidationError("unknown stage \"" + stage + "\"");
  if (stage == "gen-world") return {};
  if (stage == "build-index") return {kProducts};
  if (stage == "build-dataset") return {kProducts, kLogs, kQuality, kCot, kIndexMeta};
  if (stage == "train-sft") return {kDataset};
  if (stage == "gen-candidates") return {kSftCkpt, kVocab, kLogs, kProducts, kIndexMeta};
  if (stage == "score-feedback") return {kCandidates, kLogs, kProducts, kIndexMeta};
  if (stage == "train-align") return {kAlignData, kSftCkpt, kVocab, kLogs, kProducts};
  if (stage == "build-table")
    return {cfg.table_checkpoint, kVocab, kLogs, kEval, kProducts, kIndexMeta};
  if (stage == "serve") return {kTable, kEval, kProducts, kIndexMeta};
  return {kTable, kEval, kProducts, kIndexMeta};  // eval
}

std::vector<std::string> stage_outputs(const std::string& stage, const PipelineConfig& cfg) {
  (void)cfg;
  if (!known_stage(stage)) throw ValidationError("unknown stage \"" + stage + "\"");
  if (stage == "gen-world") return {kProducts, kLogs, kEval, kQuality, kCot};
  if (stage == "build-index") return {kIndexMeta};
  if (stage == "build-dataset") return {kDataset};
  if (stage == "train-sft") return {kVocab, kSftCkpt, kSftTrace};
  if (stage == "gen-candidates") return {kCandidates};
  if (stage == "score-feedback") return {kScored, kAlignData};
  if (stage == "train-align") return {kAlignCkpt, kAlignTrace};
  if (stage == "build-table") return {kTable};
  if (stage == "serve") return {kServeResults};
  return {kReportJson, kReportText};  // eval
}

// ---------------------------------------------------------------------------
// Shared stage plumbing

namespace {

struct Loaded {
  corpus::Catalog catalog;
  lexindex::InvertedIndex index;
};

Loaded load_catalog_and_index(const PipelineConfig& cfg) {
  const std::string products = at(cfg.workdir, kProducts);
  corpus::Catalog catalog = corpus::load_catalog(products);

  const std::string meta_path = at(cfg.workdir, kIndexMeta);
  json meta;
  try {
    meta = json::parse(read_file(meta_path));
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("cannot parse ") + kIndexMeta + ": " + e.what());
  }
  const std::string recorded = meta.at("catalog_hash").get<std::string>();
  if (recorded != hex64(hash_file(products)))
    throw ValidationError("index metadata does not match products.jsonl; rerun build-index");

  lexindex::InvertedIndex index = lexindex::build_index(catalog);
  return Loaded{std::move(catalog), std::move(index)};
}

feedback::RelevanceConfig relevance_config(const PipelineConfig& cfg) {
  feedback::RelevanceConfig rc;
  rc.tau_prime = cfg.tau_prime;
  rc.scorer = cfg.scorer;
  rc.match_mode = lexindex::parse_match_mode(cfg.match_mode);
  return rc;
}

model::Vocabulary load_vocab(const PipelineConfig& cfg) {
  return model::Vocabulary::load(at(cfg.workdir, kVocab));
}

model::ModelParams load_params_checked(const PipelineConfig& cfg, const std::string& ckpt_rel,
                                       const model::Vocabulary& vocab) {
  const model::Checkpoint ckpt = model::load_checkpoint(at(cfg.workdir, ckpt_rel));
  if (ckpt.vocab_hash != vocab.hash())
    throw ValidationError("checkpoint " + ckpt_rel +
                          " was trained against a different vocabulary");
  if (ckpt.config.vocab_size != vocab.size())
    throw ValidationError("checkpoint " + ckpt_rel + " vocabulary size mismatch");
  return model::params_from_checkpoint(ckpt);
}

// ---------------------------------------------------------------------------
// Stages

json run_gen_world(const PipelineConfig& cfg) {
  corpus::WorldConfig wc;
  wc.seed = cfg.seed;
  wc.n_products = cfg.n_products;
  wc.n_queries = cfg.n_queries;
  wc.vocab_size = cfg.vocab_size;
  wc.excellent_fraction = cfg.excellent_fraction;
  wc.empty_rewrite_fraction = cfg.empty_rewrite_fraction;
  wc.n_eval_queries = cfg.n_eval_queries;
  const corpus::SyntheticWorld world = corpus::generate_synthetic_world(wc);

  corpus::save_catalog(at(cfg.workdir, kProducts), world.catalog);
  corpus::save_logs(at(cfg.workdir, kLogs), world.logs);
  corpus::save_logs(at(cfg.workdir, kEval), world.eval_records);
  corpus::save_quality_annotations(at(cfg.workdir, kQuality), world.quality_annotations);
  corpus::save_cot_annotations(at(cfg.workdir, kCot), world.cot_annotations);
  return json::object();
}

json run_build_index(const PipelineConfig& cfg) {
  const std::string products = at(cfg.workdir, kProducts);
  const corpus::Catalog catalog = corpus::load_catalog(products);
  const lexindex::InvertedIndex index = lexindex::build_index(catalog);

  json meta;
  meta["catalog_hash"] = hex64(hash_file(products));
  meta["n_products"] = catalog.size();
  meta["n_terms"] = index.terms().size();
  write_file_atomic(at(cfg.workdir, kIndexMeta), meta.dump(2) + "\n");
  return json::object();
}

json run_build_dataset(const PipelineConfig& cfg) {
  Loaded world = load_catalog_and_index(cfg);
  const auto logs = corpus::load_logs(at(cfg.workdir, kLogs), world.catalog);
  const auto quality = corpus::load_quality_annotations(at(cfg.workdir, kQuality));
  const auto cot = corpus::load_cot_annotations(at(cfg.workdir, kCot));
  const feedback::RelevanceConfig rc = relevance_config(cfg);
  const feedback::RetrievalSet excellent = lexindex::make_set(world.catalog.excellent_ids());

  datasetgen::InitialDataset initial = datasetgen::build_initial_dataset(logs);
  const int n_initial = static_cast<int>(initial.pairs.size());
  std::vector<datasetgen::RewritePair> after_rele = datasetgen::filter_relevance(
      world.catalog, world.index, std::move(initial.pairs), rc, cfg.tau_rele);
  const int n_after_rele = static_cast<int>(after_rele.size());
  datasetgen::IncrementFiltered incr = datasetgen::filter_increment(
      world.catalog, world.index, std::move(after_rele), excellent, rc, cfg.tau_incr,
      cfg.k_titles);

  // Auxiliary pools, each capped at aux_ratio of the rewrite examples.
  const size_t aux_cap = static_cast<size_t>(
      std::ceil(cfg.aux_ratio * static_cast<double>(incr.examples.size())));
  std::vector<datasetgen::PromptExample> quality_ex = datasetgen::build_aux_quality(quality);
  if (quality_ex.size() > aux_cap) quality_ex.resize(aux_cap);

  std::vector<std::pair<std::string, std::string>> title_pairs;
  for (const corpus::QueryLogRecord& rec : logs)
    for (const std::string& title : rec.interacted_titles)
      title_pairs.emplace_back(rec.query, title);
  std::vector<datasetgen::PromptExample> title_ex = datasetgen::build_aux_title(title_pairs);
  if (title_ex.size() > aux_cap) title_ex.resize(aux_cap);

  std::vector<datasetgen::PromptExample> cot_ex = datasetgen::build_aux_cot(cot);
  if (cot_ex.size() > aux_cap) cot_ex.resize(aux_cap);

  const std::vector<datasetgen::PromptExample> mixed = datasetgen::mix_and_shuffle(
      {incr.examples, quality_ex, title_ex, cot_ex}, cfg.seed);
  datasetgen::save_dataset(at(cfg.workdir, kDataset), mixed);

  json stats;
  stats["n_initial"] = n_initial;
  stats["n_skipped"] = initial.skipped;
  stats["n_after_rele"] = n_after_rele;
  stats["n_after_incr"] = static_cast<int>(incr.pairs.size());
  stats["n_quality"] = static_cast<int>(quality_ex.size());
  stats["n_title"] = static_cast<int>(title_ex.size());
  stats["n_cot"] = static_cast<int>(cot_ex.size());
  stats["n_total"] = static_cast<int>(mixed.size());
  json extras;
  extras["dataset_stats"] = std::move(stats);
  return extras;
}

json run_train_sft(const PipelineConfig& cfg) {
  const std::vector<datasetgen::PromptExample> examples =
      datasetgen::load_dataset(at(cfg.workdir, kDataset));
  if (examples.empty()) throw std::runtime_error("dataset.jsonl holds no examples");

  std::vector<std::string> texts;
  texts.reserve(examples.size() * 2);
  for (const datasetgen::PromptExample& ex : examples) {
    texts.push_back(ex.prompt);
    texts.push_back(ex.response);
  }
  const model::Vocabulary vocab = model::Vocabulary::build(texts, cfg.min_count);
  vocab.save(at(cfg.workdir, kVocab));

  std::vector<model::EncodedExample> encoded;
  encoded.reserve(examples.size());
  for (const datasetgen::PromptExample& ex : examples) {
    const int cap = ex.task == datasetgen::Task::kRewrite ? cfg.max_prompt_tokens_rewrite
                                                          : cfg.max_prompt_tokens_other;
    encoded.push_back(model::encode(vocab, ex.prompt, ex.response, cap));
  }

  model::ModelConfig mc;
  mc.vocab_size = vocab.size();
  mc.embed_dim = cfg.embed_dim;
  mc.hidden_dim = cfg.hidden_dim;
  model::ModelParams params = model::ModelParams::init(mc, cfg.seed);

  model::TrainConfig tc;
  tc.lr = cfg.sft_lr;
  tc.epochs = cfg.sft_epochs;
  tc.batch_size = cfg.sft_batch_size;
  tc.seed = cfg.seed;
  const std::vector<model::TraceEntry> trace = model::train_sft(params, encoded, tc);

  model::save_checkpoint(at(cfg.workdir, kSftCkpt), params, vocab.hash());
  model::save_trace(at(cfg.workdir, kSftTrace), trace);
  return json::object();
}

json run_gen_candidates(const PipelineConfig& cfg) {
  Loaded world = load_catalog_and_index(cfg);
  const auto logs = corpus::load_logs(at(cfg.workdir, kLogs), world.catalog);
  const model::Vocabulary vocab = load_vocab(cfg);
  const model::ModelParams params = load_params_checked(cfg, kSftCkpt, vocab);
  const lexindex::RelevanceScorer scorer = feedback::make_scorer(cfg.scorer);
  const lexindex::MatchMode mode = lexindex::parse_match_mode(cfg.match_mode);

  std::ostringstream out;
  std::set<std::string> seen;
  int taken = 0;
  for (const corpus::QueryLogRecord& rec : logs) {
    if (taken == cfg.align_queries) break;
    const std::string canon = corpus::canonicalize(rec.query);
    if (canon.empty() || !seen.insert(canon).second) continue;
    const lexindex::RetrievalSet own = lexindex::retrieve(world.index, rec.query, mode);
    const double fraction =
        lexindex::relevant_fraction(world.catalog, rec.query, own, scorer, cfg.tau_prime);
    if (fraction >= lexindex::kTopBoundary) continue;

    const std::string prompt =
        datasetgen::render_rewrite_prompt(rec.query, rec.interacted_titles, cfg.k_titles);
    const std::vector<int> prompt_ids =
        model::encode_prompt(vocab, prompt, cfg.max_prompt_tokens_rewrite);
    const std::vector<model::BeamCandidate> beams =
        model::beam_search(params, vocab, prompt_ids, cfg.beam_width, cfg.max_rewrite_len);
    for (const model::BeamCandidate& b : beams) {
      if (b.text.empty()) continue;
      json j;
      j["candidate"] = b.text;
      j["query"] = rec.query;
      out << j.dump() << "\n";
    }
    ++taken;
  }
  write_file_atomic(at(cfg.workdir, kCandidates), out.str());
  return json::object();
}

json run_score_feedback(const PipelineConfig& cfg) {
  Loaded world = load_catalog_and_index(cfg);
  const auto logs = corpus::load_logs(at(cfg.workdir, kLogs), world.catalog);
  const feedback::RelevanceConfig rc = relevance_config(cfg);
  const feedback::Objective objective = feedback::parse_objective(cfg.objective);
  const feedback::RetrievalSet excellent = lexindex::make_set(world.catalog.excellent_ids());

  // Candidate rows grouped by query in first-seen order.
  const std::string cand_path = at(cfg.workdir, kCandidates);
  const auto lines = read_lines(cand_path);
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::string>> grouped;
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("parse error at " + cand_path + ":" + std::to_string(i + 1) +
                               ": " + e.what());
    }
    for (const auto& item : j.items()) {
      static const std::set<std::string> allowed = {"candidate", "query"};
      if (!allowed.count(item.key()))
        throw std::runtime_error("unknown field \"" + item.key() + "\" at " + cand_path + ":" +
                                 std::to_string(i + 1));
    }
    const std::string query = j.at("query").get<std::string>();
    if (!grouped.count(query)) order.push_back(query);
    grouped[query].push_back(j.at("candidate").get<std::string>());
  }

  std::map<std::string, const corpus::QueryLogRecord*> by_query;
  for (const corpus::QueryLogRecord& rec : logs) by_query.emplace(rec.query, &rec);

  std::vector<feedback::RankedCandidates> lists;
  for (const std::string& query : order) {
    const auto rec_it = by_query.find(query);
    const feedback::RetrievalSet transactions =
        rec_it == by_query.end() ? feedback::RetrievalSet{}
                                 : lexindex::make_set(rec_it->second->transactions);
    try {
      lists.push_back(feedback::score_candidates(world.catalog, world.index, query,
                                                 grouped.at(query), objective, excellent,
                                                 transactions, rc));
    } catch (const std::runtime_error& e) {
      // Queries whose candidates all lack a defined objective drop out here.
      if (std::string_view(e.what()).substr(0, 21) != "NoScorableCandidates:") throw;
    }
  }

  const std::vector<feedback::ScoredRow> rows = feedback::flatten(lists);
  feedback::save_scored(at(cfg.workdir, kScored), rows);

  std::vector<alignment::SampleRow> sample_rows;
  for (const feedback::RankedCandidates& list : lists) {
    alignment::SampleRow row;
    row.query = list.query;
    row.objective = std::string(feedback::objective_name(list.objective));
    for (const feedback::RankedCandidate& e : list.entries)
      row.candidates.emplace_back(e.rewrite, e.reward);
    sample_rows.push_back(std::move(row));
  }
  alignment::save_sample_rows(at(cfg.workdir, kAlignData), sample_rows);
  return json::object();
}

json run_train_align(const PipelineConfig& cfg) {
  const model::Vocabulary vocab = load_vocab(cfg);
  model::ModelParams params = load_params_checked(cfg, kSftCkpt, vocab);
  const auto rows = alignment::load_sample_rows(at(cfg.workdir, kAlignData));
  if (rows.empty()) throw std::runtime_error("align_data.jsonl holds no samples");

  std::vector<feedback::RankedCandidates> lists;
  for (const alignment::SampleRow& row : rows) {
    feedback::RankedCandidates list;
    list.query = row.query;
    list.objective = feedback::parse_objective(row.objective);
    for (const auto& [text, reward] : row.candidates)
      list.entries.push_back(feedback::RankedCandidate{text, reward});
    lists.push_back(std::move(list));
  }

  // Catalog is only needed to re-load the logs for prompt titles.
  const corpus::Catalog catalog = corpus::load_catalog(at(cfg.workdir, kProducts));
  const auto logs = corpus::load_logs(at(cfg.workdir, kLogs), catalog);
  std::map<std::string, std::vector<std::string>> titles;
  for (const corpus::QueryLogRecord& rec : logs) titles.emplace(rec.query, rec.interacted_titles);

  const std::vector<alignment::AlignmentSample> samples = alignment::build_samples(
      lists, titles, vocab, cfg.contrast_number, cfg.k_titles, cfg.max_prompt_tokens_rewrite,
      cfg.tie_epsilon);
  if (samples.empty()) throw std::runtime_error("no usable alignment samples");

  alignment::AlignTrainConfig atc;
  atc.align.lambda = cfg.lambda;
  atc.align.tie_epsilon = cfg.tie_epsilon;
  atc.align.sft_all_candidates = cfg.sft_all_candidates;
  atc.align.temperature_source = cfg.temperature_source;
  atc.lr = cfg.align_lr;
  atc.epochs = cfg.align_epochs;
  atc.batch_size = cfg.align_batch_size;
  atc.seed = cfg.seed;
  const std::vector<model::TraceEntry> trace = alignment::train_align(params, samples, atc);

  model::save_checkpoint(at(cfg.workdir, kAlignCkpt), params, vocab.hash());
  model::save_trace(at(cfg.workdir, kAlignTrace), trace);
  return json::object();
}

json run_build_table(const PipelineConfig& cfg) {
  Loaded world = load_catalog_and_index(cfg);
  auto queries = corpus::load_logs(at(cfg.workdir, kLogs), world.catalog);
  const auto eval_records = corpus::load_logs(at(cfg.workdir, kEval), world.catalog);
  queries.insert(queries.end(), eval_records.begin(), eval_records.end());

  const model::Vocabulary vocab = load_vocab(cfg);
  const model::ModelParams params = load_params_checked(cfg, cfg.table_checkpoint, vocab);
  const lexindex::RelevanceScorer scorer = feedback::make_scorer(cfg.scorer);

  serving::BuildTableConfig btc;
  btc.beam_width = cfg.beam_width;
  btc.max_len = cfg.max_rewrite_len;
  btc.k_titles = cfg.k_titles;
  btc.max_prompt_tokens = cfg.max_prompt_tokens_rewrite;
  btc.match_mode = lexindex::parse_match_mode(cfg.match_mode);

  const serving::RewriteTable table = serving::build_rewrite_table(
      params, vocab, queries, world.catalog, world.index, scorer, cfg.tau_prime, btc,
      hex64(hash_file(at(cfg.workdir, cfg.table_checkpoint))));
  serving::save_table(at(cfg.workdir, kTable), table);
  return json::object();
}

json run_serve(const PipelineConfig& cfg) {
  Loaded world = load_catalog_and_index(cfg);
  const auto eval_records = corpus::load_logs(at(cfg.workdir, kEval), world.catalog);
  const serving::RewriteTable table = serving::load_table(at(cfg.workdir, kTable));
  const lexindex::MatchMode mode = lexindex::parse_match_mode(cfg.match_mode);

  std::ostringstream out;
  for (const corpus::QueryLogRecord& rec : eval_records) {
    const serving::ServeResult r = serving::serve_retrieve(world.index, table, rec.query, mode);
    json j;
    j["candidates"] = r.candidates.ids;
    j["covered"] = r.covered;
    j["query"] = r.query;
    j["used_rewrite"] = r.used_rewrite ? json(*r.used_rewrite) : json(nullptr);
    out << j.dump() << "\n";
  }
  write_file_atomic(at(cfg.workdir, kServeResults), out.str());
  return json::object();
}

json run_eval(const PipelineConfig& cfg) {
  Loaded world = load_catalog_and_index(cfg);
  const auto eval_records = corpus::load_logs(at(cfg.workdir, kEval), world.catalog);
  const serving::RewriteTable table = serving::load_table(at(cfg.workdir, kTable));
  const feedback::RetrievalSet excellent = lexindex::make_set(world.catalog.excellent_ids());

  const feedback::EvalReport report = feedback::evaluate_report(
      world.catalog, world.index, table.entries, eval_records, excellent, relevance_config(cfg));
  emit_report(report, at(cfg.workdir, kReportJson), at(cfg.workdir, kReportText));
  return json::object();
}

// ---------------------------------------------------------------------------
// Manifest

// Hash for manifest bookkeeping. The rewrite table embeds a wall-clock build
// stamp in its header record; blank it before hashing so reproducible runs
// produce equal manifests.
std::string manifest_file_hash(const std::string& rel, const std::string& path) {
  if (rel != kTable) return hex64(hash_file(path));
  std::string text = read_file(path);
  const size_t eol = text.find('\n');
  json header = json::parse(text.substr(0, eol == std::string::npos ? text.size() : eol));
  if (header.contains("built_at")) header["built_at"] = "";
  std::string canon = header.dump();
  if (eol != std::string::npos) canon += text.substr(eol);
  return hex64(fnv1a(canon));
}

void update_manifest(const std::string& stage, const PipelineConfig& cfg,
                     const std::vector<std::string>& inputs,
                     const std::vector<std::string>& outputs, const json& extras,
                     int64_t duration_ms) {
  const std::string path = at(cfg.workdir, kManifest);
  json m = json::object();
  if (file_exists(path)) {
    try {
      m = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
      throw std::runtime_error(std::string("cannot parse ") + kManifest + ": " + e.what());
    }
  }
  m["config_hash"] = hex64(config_hash(cfg));
  for (const auto& item : extras.items()) m[item.key()] = item.value();

  json entry;
  entry["completed_at"] = utc_timestamp();
  entry["duration_ms"] = duration_ms;
  entry["config_hash"] = hex64(config_hash(cfg));
  json in_hashes = json::object();
  for (const std::string& rel : inputs) in_hashes[rel] = manifest_file_hash(rel, at(cfg.workdir, rel));
  entry["inputs"] = std::move(in_hashes);
  json out_hashes = json::object();
  for (const std::string& rel : outputs)
    out_hashes[rel] = manifest_file_hash(rel, at(cfg.workdir, rel));
  entry["outputs"] = std::move(out_hashes);
  if (!m.contains("stages")) m["stages"] = json::object();
  m["stages"][stage] = std::move(entry);
  write_file_atomic(path, m.dump(2) + "\n");
}

std::string producer_of(const std::string& artifact, const PipelineConfig& cfg) {
  for (const char* s : kStages)
    for (const std::string& out : stage_outputs(s, cfg))
      if (out == artifact) return s;
  return {};
}

}  // namespace

// ---------------------------------------------------------------------------
// Entry points

void run_stage(const std::string& stage, const PipelineConfig& cfg) {
  validate(cfg);
  if (!known_stage(stage)) throw ValidationError("unknown stage \"" + stage + "\"");
  fs::create_directories(cfg.workdir);

  const std::vector<std::string> inputs = stage_inputs(stage, cfg);
  for (const std::string& rel : inputs) {
    if (file_exists(at(cfg.workdir, rel))) continue;
    std::string msg = "stage \"" + stage + "\" requires \"" + rel + "\"";
    const std::string producer = producer_of(rel, cfg);
    if (!producer.empty()) msg += "; run \"" + producer + "\" first";
    throw MissingPrerequisite(msg);
  }

  const auto t0 = std::chrono::steady_clock::now();
  json extras;
  if (stage == "gen-world") extras = run_gen_world(cfg);
  else if (stage == "build-index") extras = run_build_index(cfg);
  else if (stage == "build-dataset") extras = run_build_dataset(cfg);
  else if (stage == "train-sft") extras = run_train_sft(cfg);
  else if (stage == "gen-candidates") extras = run_gen_candidates(cfg);
  else if (stage == "score-feedback") extras = run_score_feedback(cfg);
  else if (stage == "train-align") extras = run_train_align(cfg);
  else if (stage == "build-table") extras = run_build_table(cfg);
  else if (stage == "serve") extras = run_serve(cfg);
  else extras = run_eval(cfg);
  const auto t1 = std::chrono::steady_clock::now();
  const int64_t ms = std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();

  update_manifest(stage, cfg, inputs, stage_outputs(stage, cfg), extras, ms);
}

int run_stage_exit_code(const std::string& stage, const PipelineConfig& cfg,
                        std::string* error_out) {
  try {
    run_stage(stage, cfg);
    return 0;
  } catch (const ValidationError& e) {
    if (error_out) *error_out = e.what();
    return 1;
  } catch (const MissingPrerequisite& e) {
    if (error_out) *error_out = e.what();
    return 2;
  } catch (const std::exception& e) {
    if (error_out) *error_out = e.what();
    return 3;
  }
}

// ---------------------------------------------------------------------------
// Reports

std::vector<std::string> report_fields() {
  return {"count",     "mean_rele", "incr_valid_count",
          "mean_incr", "hitrate_valid_count", "mean_hitrate"};
}

namespace {

json segment_json(const feedback::SegmentRow& row) {
  json j;
  j["count"] = row.count;
  j["mean_rele"] = row.count > 0 ? json(row.mean_rele) : json(nullptr);
  j["incr_valid_count"] = row.incr_valid_count;
  j["mean_incr"] = row.incr_valid_count > 0 ? json(row.mean_incr) : json(nullptr);
  j["hitrate_valid_count"] = row.hitrate_valid_count;
  j["mean_hitrate"] = row.hitrate_valid_count > 0 ? json(row.mean_hitrate) : json(nullptr);
  return j;
}

void text_row(std::ostringstream& out, const char* name, const feedback::SegmentRow& row) {
  auto cell = [](bool defined, double v) {
    if (!defined) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return std::string(buf);
  };
  char line[128];
  std::snprintf(line, sizeof(line), "%-8s %7d %10s %10s %10s\n", name, row.count,
                cell(row.count > 0, row.mean_rele).c_str(),
                cell(row.incr_valid_count > 0, row.mean_incr).c_str(),
                cell(row.hitrate_valid_count > 0, row.mean_hitrate).c_str());
  out << line;
}

}  // namespace

std::string report_to_json(const feedback::EvalReport& report) {
  json j;
  json segments;
  segments["top"] = segment_json(report.top);
  segments["torso"] = segment_json(report.torso);
  segments["tail"] = segment_json(report.tail);
  segments["all"] = segment_json(report.all);
  j["segments"] = std::move(segments);
  return j.dump(2) + "\n";
}

std::string report_to_text(const feedback::EvalReport& report) {
  std::ostringstream out;
  char header[128];
  std::snprintf(header, sizeof(header), "%-8s %7s %10s %10s %10s\n", "segment", "count", "rele",
                "incr", "hitrate");
  out << header;
  text_row(out, "top", report.top);
  text_row(out, "torso", report.torso);
  text_row(out, "tail", report.tail);
  text_row(out, "all", report.all);
  return out.str();
}

void emit_report(const feedback::EvalReport& report, const std::string& json_path,
                 const std::string& text_path) {
  write_file_atomic(json_path, report_to_json(report));
  write_file_atomic(text_path, report_to_text(report));
}

}  // namespace longtail::pipeline
