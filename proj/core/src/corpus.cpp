#include "longtail/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "longtail/common.hpp"
#include "longtail/rng.hpp"

namespace longtail::corpus {

using nlohmann::json;

TokenList tokenize(std::string_view text) {
  TokenList out;
  std::string cur;
  for (unsigned char c : text) {
    if (c >= 0x80) {
      cur.push_back(static_cast<char>(c));
    } else if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string canonicalize(std::string_view text) { return join(tokenize(text), " "); }

Catalog::Catalog(std::vector<Product> products) : products_(std::move(products)) {
  if (products_.empty()) throw std::invalid_argument("catalog has no products");
  by_id_.reserve(products_.size());
  for (size_t i = 0; i < products_.size(); ++i) {
    const Product& p = products_[i];
    if (p.id.empty()) throw std::invalid_argument("product id is empty");
    if (tokenize(p.title).empty())
      throw std::invalid_argument("product title tokenizes empty: id \"" + p.id + "\"");
    if (!by_id_.emplace(p.id, i).second)
      throw std::invalid_argument("duplicate product id \"" + p.id + "\"");
  }
}

bool Catalog::contains(std::string_view id) const {
  return by_id_.find(std::string(id)) != by_id_.end();
}

const Product* Catalog::find(std::string_view id) const {
  auto it = by_id_.find(std::string(id));
  return it == by_id_.end() ? nullptr : &products_[it->second];
}

const std::string& Catalog::title_of(std::string_view id) const {
  const Product* p = find(id);
  if (!p) throw std::out_of_range("unknown product id \"" + std::string(id) + "\"");
  return p->title;
}

std::vector<std::string> Catalog::excellent_ids() const {
  std::vector<std::string> out;
  for (const Product& p : products_)
    if (p.excellent) out.push_back(p.id);
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

json parse_record_line(const std::string& path, size_t line_no, const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("parse error at " + path + ":" + std::to_string(line_no) + ": " +
                             e.what());
  }
  if (!j.is_object())
    throw std::runtime_error("record at " + path + ":" + std::to_string(line_no) +
                             " is not an object");
  return j;
}

void reject_unknown_fields(const json& j, const std::set<std::string>& allowed,
                           const std::string& path, size_t line_no) {
  for (const auto& item : j.items()) {
    if (!allowed.count(item.key()))
      throw std::runtime_error("unknown field \"" + item.key() + "\" at " + path + ":" +
                               std::to_string(line_no));
  }
}

std::string get_string(const json& j, const char* key, const std::string& path, size_t line_no) {
  if (!j.contains(key) || !j[key].is_string())
    throw std::runtime_error(std::string("missing or non-string field \"") + key + "\" at " +
                             path + ":" + std::to_string(line_no));
  return j[key].get<std::string>();
}

std::vector<std::string> get_string_array(const json& j, const char* key, const std::string& path,
                                          size_t line_no) {
  if (!j.contains(key) || !j[key].is_array())
    throw std::runtime_error(std::string("missing or non-array field \"") + key + "\" at " + path +
                             ":" + std::to_string(line_no));
  std::vector<std::string> out;
  for (const auto& v : j[key]) {
    if (!v.is_string())
      throw std::runtime_error(std::string("non-string element in \"") + key + "\" at " + path +
                               ":" + std::to_string(line_no));
    out.push_back(v.get<std::string>());
  }
  return out;
}

}  // namespace

Catalog load_catalog(const std::string& path) {
  const auto lines = read_lines(path);
  std::vector<Product> products;
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const json j = parse_record_line(path, i + 1, lines[i]);
    reject_unknown_fields(j, {"id", "title", "excellent"}, path, i + 1);
    Product p;
    p.id = get_string(j, "id", path, i + 1);
    p.title = get_string(j, "title", path, i + 1);
    if (!j.contains("excellent") || !j["excellent"].is_boolean())
      throw std::runtime_error("missing or non-boolean field \"excellent\" at " + path + ":" +
                               std::to_string(i + 1));
    p.excellent = j["excellent"].get<bool>();
    products.push_back(std::move(p));
  }
  try {
    return Catalog(std::move(products));
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string(e.what()) + " in " + path);
  }
}

void save_catalog(const std::string& path, const Catalog& catalog) {
  std::ostringstream out;
  for (const Product& p : catalog.products()) {
    json j;
    j["id"] = p.id;
    j["title"] = p.title;
    j["excellent"] = p.excellent;
    out << j.dump() << "\n";
  }
  write_file_atomic(path, out.str());
}

std::vector<QueryLogRecord> load_logs(const std::string& path, const Catalog& catalog) {
  const auto lines = read_lines(path);
  std::vector<QueryLogRecord> records;
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const json j = parse_record_line(path, i + 1, lines[i]);
    reject_unknown_fields(j, {"query", "legacy_rewrites", "interacted_titles", "transactions"},
                          path, i + 1);
    QueryLogRecord r;
    r.query = get_string(j, "query", path, i + 1);
    r.legacy_rewrites = get_string_array(j, "legacy_rewrites", path, i + 1);
    r.interacted_titles = get_string_array(j, "interacted_titles", path, i + 1);
    r.transactions = get_string_array(j, "transactions", path, i + 1);
    for (const std::string& id : r.transactions) {
      if (!catalog.contains(id))
        throw std::runtime_error("unknown transaction product id \"" + id + "\" for query \"" +
                                 r.query + "\" at " + path + ":" + std::to_string(i + 1));
    }
    std::sort(r.transactions.begin(), r.transactions.end());
    r.transactions.erase(std::unique(r.transactions.begin(), r.transactions.end()),
                         r.transactions.end());
    records.push_back(std::move(r));
  }
  return records;
}

void save_logs(const std::string& path, std::span<const QueryLogRecord> records) {
  std::ostringstream out;
  for (const QueryLogRecord& r : records) {
    json j;
    j["query"] = r.query;
    j["legacy_rewrites"] = r.legacy_rewrites;
    j["interacted_titles"] = r.interacted_titles;
    j["transactions"] = r.transactions;
    out << j.dump() << "\n";
  }
  write_file_atomic(path, out.str());
}

std::vector<QualityAnnotation> load_quality_annotations(const std::string& path) {
  const auto lines = read_lines(path);
  std::vector<QualityAnnotation> rows;
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const json j = parse_record_line(path, i + 1, lines[i]);
    reject_unknown_fields(j, {"query", "rewrite", "label"}, path, i + 1);
    QualityAnnotation row;
    row.query = get_string(j, "query", path, i + 1);
    row.rewrite = get_string(j, "rewrite", path, i + 1);
    row.label = get_string(j, "label", path, i + 1);
    if (row.label != "yes" && row.label != "no")
      throw std::runtime_error("label must be \"yes\" or \"no\" at " + path + ":" +
                               std::to_string(i + 1));
    rows.push_back(std::move(row));
  }
  return rows;
}

void save_quality_annotations(const std::string& path, std::span<const QualityAnnotation> rows) {
  std::ostringstream out;
  for (const QualityAnnotation& r : rows) {
    json j;
    j["query"] = r.query;
    j["rewrite"] = r.rewrite;
    j["label"] = r.label;
    out << j.dump() << "\n";
  }
  write_file_atomic(path, out.str());
}

std::vector<CotAnnotation> load_cot_annotations(const std::string& path) {
  const auto lines = read_lines(path);
  std::vector<CotAnnotation> rows;
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const json j = parse_record_line(path, i + 1, lines[i]);
    reject_unknown_fields(j, {"query", "thought", "rewrite"}, path, i + 1);
    CotAnnotation row;
    row.query = get_string(j, "query", path, i + 1);
    row.thought = get_string(j, "thought", path, i + 1);
    row.rewrite = get_string(j, "rewrite", path, i + 1);
    rows.push_back(std::move(row));
  }
  return rows;
}

void save_cot_annotations(const std::string& path, std::span<const CotAnnotation> rows) {
  std::ostringstream out;
  for (const CotAnnotation& r : rows) {
    json j;
    j["query"] = r.query;
    j["thought"] = r.thought;
    j["rewrite"] = r.rewrite;
    out << j.dump() << "\n";
  }
  write_file_atomic(path, out.str());
}

std::vector<std::string> synthetic_vocabulary(int size) {
  static const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m",
                                  "n", "p", "r", "s", "t", "v", "z"};
  static const char* kVowels[] = {"a", "e", "i", "o", "u"};
  constexpr int kMax = 14 * 5 * 14 * 5;
  if (size < 1 || size > kMax)
    throw std::invalid_argument("vocab_size must be in [1, " + std::to_string(kMax) + "]");
  std::vector<std::string> words;
  words.reserve(static_cast<size_t>(size));
  for (int i = 0; i < size; ++i) {
    int v = i;
    std::string w;
    w += kOnsets[v % 14];
    v /= 14;
    w += kVowels[v % 5];
    v /= 5;
    w += kOnsets[v % 14];
    v /= 14;
    w += kVowels[v % 5];
    words.push_back(std::move(w));
  }
  return words;
}

namespace {

double overlap_fraction(const TokenList& query_tokens, const TokenList& title_tokens) {
  if (query_tokens.empty()) return 0.0;
  std::set<std::string> qset(query_tokens.begin(), query_tokens.end());
  std::set<std::string> tset(title_tokens.begin(), title_tokens.end());
  size_t hit = 0;
  for (const std::string& t : qset)
    if (tset.count(t)) ++hit;
  return static_cast<double>(hit) / static_cast<double>(qset.size());
}

struct Perturbation {
  std::string text;
  std::string thought;
};

// One scripted edit: synonym swap, token drop, or title-token append. Returns
// nothing when no edit distinct from the query exists.
std::optional<Perturbation> perturb_query(const TokenList& qtoks, const TokenList& title_toks,
                                          const std::vector<std::string>& vocab,
                                          const std::unordered_map<std::string, int>& vindex,
                                          Rng& rng) {
  const int half = static_cast<int>(vocab.size()) / 2;
  for (int attempt = 0; attempt < 6; ++attempt) {
    const double roll = rng.uniform01();
    TokenList toks = qtoks;
    std::string thought;
    if (roll < 0.45 || (qtoks.size() < 2 && roll < 0.75)) {
      const size_t pos = rng.uniform_index(toks.size());
      auto it = vindex.find(toks[pos]);
      if (it == vindex.end()) continue;
      const std::string& syn =
          vocab[static_cast<size_t>((it->second + half) % static_cast<int>(vocab.size()))];
      thought = "replace " + toks[pos] + " with " + syn;
      toks[pos] = syn;
    } else if (roll < 0.75) {
      const size_t pos = rng.uniform_index(toks.size());
      thought = "drop " + toks[pos];
      toks.erase(toks.begin() + static_cast<std::ptrdiff_t>(pos));
    } else {
      TokenList extras;
      for (const std::string& t : title_toks)
        if (std::find(qtoks.begin(), qtoks.end(), t) == qtoks.end()) extras.push_back(t);
      if (extras.empty()) continue;
      const std::string& add = extras[rng.uniform_index(extras.size())];
      thought = "add " + add;
      toks.push_back(add);
    }
    if (toks.empty()) continue;
    std::string text = join(toks, " ");
    if (text == join(qtoks, " ")) continue;
    return Perturbation{std::move(text), std::move(thought)};
  }
  return std::nullopt;
}

struct QueryDraw {
  std::string query;
  TokenList qtoks;
  size_t src_product;
};

QueryDraw draw_query(const std::vector<Product>& products,
                     const std::vector<TokenList>& title_tokens,
                     const std::vector<std::string>& vocab, Rng& rng) {
  const size_t src = rng.uniform_index(products.size());
  TokenList uniq;
  for (const std::string& t : title_tokens[src])
    if (std::find(uniq.begin(), uniq.end(), t) == uniq.end()) uniq.push_back(t);
  rng.shuffle(uniq);

  const double lroll = rng.uniform01();
  int qlen = lroll < 0.1 ? 1 : (lroll < 0.4 ? 2 : 3);
  if (qlen > static_cast<int>(uniq.size())) qlen = static_cast<int>(uniq.size());
  TokenList toks(uniq.begin(), uniq.begin() + qlen);

  // A slice of multi-term queries swaps in an off-title term; those usually
  // match no product under conjunctive retrieval and feed the zero-recall
  // side of the pipeline. One source-title term always survives the swap.
  if (toks.size() >= 2 && rng.uniform01() < 0.3) {
    for (int attempt = 0; attempt < 6; ++attempt) {
      const std::string& cand = vocab[rng.uniform_index(vocab.size())];
      if (std::find(toks.begin(), toks.end(), cand) != toks.end()) continue;
      toks[rng.uniform_index(toks.size())] = cand;
      break;
    }
  }

  QueryDraw d;
  d.query = join(toks, " ");
  d.qtoks = std::move(toks);
  d.src_product = src;
  return d;
}

QueryLogRecord draw_record(const WorldConfig& cfg, const std::vector<Product>& products,
                           const std::vector<TokenList>& title_tokens,
                           const std::vector<std::string>& vocab,
                           const std::unordered_map<std::string, int>& vindex, Rng& rng) {
  const QueryDraw d = draw_query(products, title_tokens, vocab, rng);
  QueryLogRecord rec;
  rec.query = d.query;

  if (rng.uniform01() >= cfg.empty_rewrite_fraction) {
    const int want = rng.uniform_int(1, std::max(1, cfg.max_legacy_rewrites));
    if (d.qtoks.size() >= 2) {
      // Lead with a broadening edit: dropping a term can only widen conjunctive
      // retrieval, which is what a usable legacy rewrite mostly did.
      TokenList toks = d.qtoks;
      toks.erase(toks.begin() + static_cast<std::ptrdiff_t>(rng.uniform_index(toks.size())));
      rec.legacy_rewrites.push_back(join(toks, " "));
    }
    for (int attempt = 0; attempt < 4 * want; ++attempt) {
      if (static_cast<int>(rec.legacy_rewrites.size()) >= want) break;
      auto p = perturb_query(d.qtoks, title_tokens[d.src_product], vocab, vindex, rng);
      if (!p) break;
      if (std::find(rec.legacy_rewrites.begin(), rec.legacy_rewrites.end(), p->text) ==
          rec.legacy_rewrites.end())
        rec.legacy_rewrites.push_back(p->text);
    }
  }

  std::vector<size_t> sharing;
  for (size_t i = 0; i < products.size(); ++i) {
    for (const std::string& t : d.qtoks) {
      if (std::find(title_tokens[i].begin(), title_tokens[i].end(), t) != title_tokens[i].end()) {
        sharing.push_back(i);
        break;
      }
    }
  }
  if (!sharing.empty() && cfg.max_interacted_titles > 0) {
    std::vector<size_t> pool = sharing;
    rng.shuffle(pool);
    const int want = rng.uniform_int(0, cfg.max_interacted_titles);
    for (int k = 0; k < want && k < static_cast<int>(pool.size()); ++k)
      rec.interacted_titles.push_back(products[pool[static_cast<size_t>(k)]].title);
  }

  // Transactions are drawn from products relevant to the query so generated
  // worlds keep out-of-search hit fractions within [0, 1].
  std::vector<size_t> relevant;
  for (size_t i = 0; i < products.size(); ++i)
    if (overlap_fraction(d.qtoks, title_tokens[i]) > 0.5) relevant.push_back(i);
  if (!relevant.empty() && cfg.max_transactions > 0) {
    std::vector<size_t> pool = relevant;
    rng.shuffle(pool);
    const int want = rng.uniform_int(0, cfg.max_transactions);
    for (int k = 0; k < want && k < static_cast<int>(pool.size()); ++k)
      rec.transactions.push_back(products[pool[static_cast<size_t>(k)]].id);
    std::sort(rec.transactions.begin(), rec.transactions.end());
    rec.transactions.erase(std::unique(rec.transactions.begin(), rec.transactions.end()),
                           rec.transactions.end());
  }
  return rec;
}

}  // namespace

SyntheticWorld generate_synthetic_world(const WorldConfig& cfg) {
  if (cfg.n_products < 1) throw std::invalid_argument("n_products must be positive");
  if (cfg.n_queries < 1) throw std::invalid_argument("n_queries must be positive");
  if (cfg.excellent_fraction < 0.0 || cfg.excellent_fraction > 1.0)
    throw std::invalid_argument("excellent_fraction must be in [0, 1]");

  const std::vector<std::string> vocab = synthetic_vocabulary(cfg.vocab_size);
  std::unordered_map<std::string, int> vindex;
  for (int i = 0; i < static_cast<int>(vocab.size()); ++i) vindex[vocab[static_cast<size_t>(i)]] = i;

  Rng rng(cfg.seed);

  // Terms are grouped into families and each product leans on one family, so
  // catalog titles co-occur the way items in a real category do. Without that
  // clustering almost no two titles share a term pair and conjunctive
  // retrieval degenerates to singletons.
  const int n_families = std::max(1, cfg.vocab_size / 10);
  std::vector<std::vector<std::string>> families(static_cast<size_t>(n_families));
  for (int i = 0; i < static_cast<int>(vocab.size()); ++i)
    families[static_cast<size_t>(i % n_families)].push_back(vocab[static_cast<size_t>(i)]);

  std::vector<Product> products;
  std::vector<TokenList> title_tokens;
  products.reserve(static_cast<size_t>(cfg.n_products));
  for (int i = 0; i < cfg.n_products; ++i) {
    Product p;
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "p%06d", i);
    p.id = idbuf;
    const std::vector<std::string>& fam = families[rng.uniform_index(families.size())];
    // Lengths lean long (max of two draws): short titles rarely have room to
    // gain neighbors, and real listings pad titles with attributes anyway.
    const int tlen = 2 + std::max(rng.uniform_int(0, 4), rng.uniform_int(0, 4));
    TokenList toks;
    for (int attempt = 0; static_cast<int>(toks.size()) < tlen && attempt < 40; ++attempt) {
      const std::string& cand = rng.uniform01() < 0.85 ? fam[rng.uniform_index(fam.size())]
                                                       : vocab[rng.uniform_index(vocab.size())];
      if (std::find(toks.begin(), toks.end(), cand) == toks.end()) toks.push_back(cand);
    }
    p.title = join(toks, " ");
    p.excellent = rng.uniform01() < cfg.excellent_fraction;
    title_tokens.push_back(tokenize(p.title));
    products.push_back(std::move(p));
  }

  std::vector<QueryLogRecord> logs;
  for (int q = 0; q < cfg.n_queries; ++q)
    logs.push_back(draw_record(cfg, products, title_tokens, vocab, vindex, rng));

  const int n_eval = cfg.n_eval_queries > 0 ? cfg.n_eval_queries : std::max(10, cfg.n_queries / 4);
  std::vector<QueryLogRecord> eval_records;
  for (int q = 0; q < n_eval; ++q)
    eval_records.push_back(draw_record(cfg, products, title_tokens, vocab, vindex, rng));

  std::vector<QualityAnnotation> quality;
  for (const QueryLogRecord& rec : logs) {
    if (rec.legacy_rewrites.empty()) continue;
    if (rng.uniform01() >= 0.5) continue;
    QualityAnnotation row;
    row.query = rec.query;
    row.rewrite = rec.legacy_rewrites[0];
    row.label =
        overlap_fraction(tokenize(row.query), tokenize(row.rewrite)) >= 0.5 ? "yes" : "no";
    quality.push_back(std::move(row));
  }

  std::vector<CotAnnotation> cot;
  const int n_cot = std::max(1, cfg.n_queries / 3);
  for (int i = 0; i < n_cot; ++i) {
    const QueryLogRecord& rec = logs[rng.uniform_index(logs.size())];
    const TokenList qtoks = tokenize(rec.query);
    if (qtoks.empty()) continue;
    auto p = perturb_query(qtoks, qtoks, vocab, vindex, rng);
    if (!p) continue;
    cot.push_back(CotAnnotation{rec.query, p->thought, p->text});
  }

  return SyntheticWorld{Catalog(std::move(products)), std::move(logs), std::move(eval_records),
                        std::move(quality), std::move(cot)};
}

}  // namespace longtail::corpus
