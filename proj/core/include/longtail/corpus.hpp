#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace longtail::corpus {

using TokenList = std::vector<std::string>;

// Lowercases ASCII letters and splits on runs of whitespace and ASCII
// punctuation. Bytes >= 0x80 are kept verbatim so UTF-8 sequences survive
// intact. Deterministic; idempotent on its own joined output.
TokenList tokenize(std::string_view text);

// tokenize + rejoin with single spaces. Canonical key form shared by dataset
// construction and serving lookups.
std::string canonicalize(std::string_view text);

struct Product {
  std::string id;
  std::string title;
  bool excellent = false;  // high-quality flag, the Z_e membership source
};

// Product collection with unique non-empty ids and titles that tokenize
// non-empty. Construction validates; lookups are O(1).
class Catalog {
 public:
  explicit Catalog(std::vector<Product> products);

  const std::vector<Product>& products() const { return products_; }
  size_t size() const { return products_.size(); }
  bool contains(std::string_view id) const;
  const Product* find(std::string_view id) const;
  // Throws if the id is unknown.
  const std::string& title_of(std::string_view id) const;
  // Ids of products flagged excellent, sorted ascending.
  std::vector<std::string> excellent_ids() const;

 private:
  std::vector<Product> products_;
  std::unordered_map<std::string, size_t> by_id_;
};

struct QueryLogRecord {
  std::string query;
  std::vector<std::string> legacy_rewrites;    // best-ranked first; may be empty
  std::vector<std::string> interacted_titles;  // most recent first
  std::vector<std::string> transactions;       // product ids, this query's slice of E
};

// Line-delimited records; rejects unknown fields, duplicate ids, and
// transactions referencing products absent from the catalog. Errors carry the
// offending line number.
Catalog load_catalog(const std::string& path);
void save_catalog(const std::string& path, const Catalog& catalog);
std::vector<QueryLogRecord> load_logs(const std::string& path, const Catalog& catalog);
void save_logs(const std::string& path, std::span<const QueryLogRecord> records);

// Scripted annotation rows, ingested from files by dataset construction.
struct QualityAnnotation {
  std::string query;
  std::string rewrite;
  std::string label;  // "yes" or "no"
};

struct CotAnnotation {
  std::string query;
  std::string thought;
  std::string rewrite;
};

std::vector<QualityAnnotation> load_quality_annotations(const std::string& path);
void save_quality_annotations(const std::string& path, std::span<const QualityAnnotation> rows);
std::vector<CotAnnotation> load_cot_annotations(const std::string& path);
void save_cot_annotations(const std::string& path, std::span<const CotAnnotation> rows);

struct WorldConfig {
  uint64_t seed = 7;
  int n_products = 100;
  int n_queries = 50;
  int vocab_size = 40;
  double excellent_fraction = 0.3;
  double empty_rewrite_fraction = 0.1;
  int max_legacy_rewrites = 3;
  int max_interacted_titles = 3;
  int max_transactions = 4;
  int n_eval_queries = 0;  // 0 picks max(10, n_queries / 4)
};

struct SyntheticWorld {
  Catalog catalog;
  std::vector<QueryLogRecord> logs;
  std::vector<QueryLogRecord> eval_records;
  std::vector<QualityAnnotation> quality_annotations;
  std::vector<CotAnnotation> cot_annotations;
};

// Pure function of its config: equal configs produce byte-identical worlds.
// Titles cluster around term families so conjunctive retrieval finds real
// neighborhoods. Most queries are drawn whole from one title; a slice of the
// multi-term ones swaps in an off-title term and usually lands zero-recall,
// but every query keeps at least one term shared with some title.
// Transactions reference only products relevant to the query under the
// default overlap scorer, so out-of-search hit fractions stay within [0, 1]
// on generated data.
SyntheticWorld generate_synthetic_world(const WorldConfig& cfg);

// Deterministic pseudo-word list; a function of size alone.
std::vector<std::string> synthetic_vocabulary(int size);

}  // namespace longtail::corpus
