#include <doctest.h>

#include <string>
#include <vector>

#include "longtail/corpus.hpp"
#include "longtail/feedback.hpp"
#include "longtail/lexindex.hpp"
#include "support/oracles.hpp"

using namespace longtail;
using namespace longtail::lexindex;
using longtail::corpus::Catalog;
using longtail::corpus::Product;

namespace {

Catalog tiny_catalog() {
  return Catalog({
      {"p1", "red summer dress", false},
      {"p2", "red shoe", false},
      {"p3", "blue dress", false},
      {"p4", "green hat", false},
      {"p5", "red dress", false},
  });
}

}  // namespace

TEST_SUITE("lexindex") {
  TEST_CASE("match mode names round-trip") {
    CHECK(parse_match_mode("and") == MatchMode::kAnd);
    CHECK(parse_match_mode("or") == MatchMode::kOr);
    CHECK(match_mode_name(MatchMode::kAnd) == "and");
    CHECK(match_mode_name(MatchMode::kOr) == "or");
    CHECK_THROWS_WITH(parse_match_mode("xor"), "unknown match mode \"xor\"");
  }

  TEST_CASE("make_set sorts and dedups") {
    auto s = make_set({"b", "a", "b", "c", "a"});
    CHECK(s.ids == std::vector<std::string>{"a", "b", "c"});
    CHECK(s.size() == 3);
    CHECK(s.contains("b"));
    CHECK_FALSE(s.contains("d"));
    CHECK(make_set({}).empty());
  }

  TEST_CASE("set algebra") {
    auto a = make_set({"p1", "p2", "p3"});
    auto b = make_set({"p2", "p4"});
    CHECK(set_union(a, b).ids == std::vector<std::string>{"p1", "p2", "p3", "p4"});
    CHECK(set_intersection(a, b).ids == std::vector<std::string>{"p2"});
    CHECK(set_union(a, make_set({})) == a);
    CHECK(set_intersection(a, make_set({})).empty());
  }

  TEST_CASE("postings are exact on a hand catalog") {
    auto cat = tiny_catalog();
    InvertedIndex index(cat);
    CHECK(index.catalog_size() == 5);
    REQUIRE(index.postings("red") != nullptr);
    CHECK(*index.postings("red") == std::vector<std::string>{"p1", "p2", "p5"});
    CHECK(*index.postings("dress") == std::vector<std::string>{"p1", "p3", "p5"});
    CHECK(*index.postings("hat") == std::vector<std::string>{"p4"});
    CHECK(index.postings("sofa") == nullptr);
    CHECK(index.terms().size() == 7);  // red summer dress shoe blue green hat
  }

  TEST_CASE("terms cover exactly the title vocabulary") {
    auto cat = tiny_catalog();
    InvertedIndex index(cat);
    std::vector<std::string> expect{"blue", "dress", "green", "hat", "red", "shoe", "summer"};
    std::vector<std::string> got;
    for (const auto& [term, ids] : index.terms()) got.push_back(term);
    CHECK(got == expect);
  }

  TEST_CASE("retrieve follows conjunctive and disjunctive semantics") {
    auto cat = tiny_catalog();
    InvertedIndex index(cat);
    CHECK(retrieve(index, "red dress", MatchMode::kAnd).ids ==
          std::vector<std::string>{"p1", "p5"});
    CHECK(retrieve(index, "red dress", MatchMode::kOr).ids ==
          std::vector<std::string>{"p1", "p2", "p3", "p5"});
    CHECK(retrieve(index, "Red DRESS!", MatchMode::kAnd).ids ==
          std::vector<std::string>{"p1", "p5"});  // retrieval tokenizes its input
    CHECK(retrieve(index, "sofa", MatchMode::kAnd).empty());
    CHECK(retrieve(index, "red sofa", MatchMode::kAnd).empty());
    CHECK(retrieve(index, "red sofa", MatchMode::kOr).ids ==
          std::vector<std::string>{"p1", "p2", "p5"});
    CHECK_THROWS_WITH(retrieve(index, "  ,, "), "EmptyQuery: \"  ,, \" tokenizes to nothing");
  }

  TEST_CASE("retrieve matches the brute-force scan on synthetic worlds") {
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
      corpus::WorldConfig cfg;
      cfg.seed = seed;
      cfg.n_products = 300;
      cfg.n_queries = 100;
      auto world = corpus::generate_synthetic_world(cfg);
      InvertedIndex index(world.catalog);
      for (const auto& rec : world.logs) {
        CHECK(retrieve(index, rec.query, MatchMode::kAnd) ==
              oracles::brute_retrieve(world.catalog, rec.query, MatchMode::kAnd));
        CHECK(retrieve(index, rec.query, MatchMode::kOr) ==
              oracles::brute_retrieve(world.catalog, rec.query, MatchMode::kOr));
        for (const auto& rw : rec.legacy_rewrites) {
          CHECK(retrieve(index, rw, MatchMode::kAnd) ==
                oracles::brute_retrieve(world.catalog, rw, MatchMode::kAnd));
          CHECK(retrieve(index, rw, MatchMode::kOr) ==
                oracles::brute_retrieve(world.catalog, rw, MatchMode::kOr));
        }
      }
    }
  }

  TEST_CASE("adding a token narrows AND and widens OR") {
    corpus::WorldConfig cfg;
    cfg.seed = 17;
    cfg.n_products = 200;
    auto world = corpus::generate_synthetic_world(cfg);
    InvertedIndex index(world.catalog);
    const auto vocab = corpus::synthetic_vocabulary(cfg.vocab_size);
    for (size_t i = 0; i + 1 < vocab.size(); i += 7) {
      const std::string one = vocab[i];
      const std::string two = vocab[i] + " " + vocab[i + 1];
      auto and_one = retrieve(index, one, MatchMode::kAnd);
      auto and_two = retrieve(index, two, MatchMode::kAnd);
      auto or_one = retrieve(index, one, MatchMode::kOr);
      auto or_two = retrieve(index, two, MatchMode::kOr);
      CHECK(set_intersection(and_two, and_one) == and_two);  // subset
      CHECK(set_union(or_two, or_one) == or_two);            // superset
    }
  }

  TEST_CASE("retrieve_union equals the union of the parts") {
    auto cat = tiny_catalog();
    InvertedIndex index(cat);
    auto u = retrieve_union(index, "red dress", "blue dress");
    CHECK(u == set_union(retrieve(index, "red dress"), retrieve(index, "blue dress")));
    CHECK(u.ids == std::vector<std::string>{"p1", "p3", "p5"});
  }

  TEST_CASE("relevant_fraction on explicit sets") {
    auto cat = tiny_catalog();
    auto scorer = feedback::make_scorer("token_overlap");
    // "red dress" vs p1 "red summer dress": 2/2 = 1.0; vs p2 "red shoe": 1/2 = 0.5.
    auto set = make_set({"p1", "p2"});
    CHECK(relevant_fraction(cat, "red dress", set, scorer, 0.5) == 0.5);
    CHECK(relevant_fraction(cat, "red dress", set, scorer, 0.4) == 1.0);
    CHECK(relevant_fraction(cat, "red dress", make_set({}), scorer, 0.5) == 0.0);
    // The threshold is strict: a score equal to tau_prime does not count.
    CHECK(relevant_fraction(cat, "red dress", make_set({"p2"}), scorer, 0.5) == 0.0);
  }

  TEST_CASE("segment boundaries") {
    // One catalog, one query, scorer swapped to steer the fraction.
    Catalog cat({{"a", "x y", false}, {"b", "x z", false}, {"c", "x w", false},
                 {"d", "x v", false}, {"e", "x u", false}, {"f", "x t", false},
                 {"g", "x s", false}, {"h", "x r", false}, {"i", "x q", false},
                 {"j", "x p", false}});
    InvertedIndex index(cat);
    // A scorer keyed off an allowlist of titles steers the fraction exactly.
    auto allow = [&](int n_relevant) {
      return RelevanceScorer([n_relevant, &cat](std::string_view, std::string_view title) {
        for (int i = 0; i < n_relevant; ++i)
          if (cat.products()[static_cast<size_t>(i)].title == title) return 1.0;
        return 0.0;
      });
    };
    // All ten products match "x"; vary how many score as relevant.
    CHECK(segment_query(cat, index, "x", allow(8), 0.5) == QuerySegment::kTop);     // 0.8
    CHECK(segment_query(cat, index, "x", allow(7), 0.5) == QuerySegment::kTorso);   // 0.7 boundary
    CHECK(segment_query(cat, index, "x", allow(5), 0.5) == QuerySegment::kTorso);   // 0.5
    CHECK(segment_query(cat, index, "x", allow(1), 0.5) == QuerySegment::kTorso);   // 0.1 boundary
    CHECK(segment_query(cat, index, "x", allow(0), 0.5) == QuerySegment::kTail);    // 0.0
  }

  TEST_CASE("empty retrieval lands in the tail") {
    auto cat = tiny_catalog();
    InvertedIndex index(cat);
    auto scorer = feedback::make_scorer("token_overlap");
    CHECK(segment_query(cat, index, "sofa", scorer, 0.5) == QuerySegment::kTail);
  }

  TEST_CASE("segment names") {
    CHECK(segment_name(QuerySegment::kTop) == "top");
    CHECK(segment_name(QuerySegment::kTorso) == "torso");
    CHECK(segment_name(QuerySegment::kTail) == "tail");
  }

  TEST_CASE("own-retrieval fractions under the default scorer are all or nothing") {
    // Under conjunctive matching every retrieved title contains every query
    // token, so the query-token overlap score is exactly 1.0. The fraction of
    // a query's own retrieval is therefore 0 or 1, never in between.
    corpus::WorldConfig cfg;
    cfg.seed = 23;
    cfg.n_products = 150;
    auto world = corpus::generate_synthetic_world(cfg);
    InvertedIndex index(world.catalog);
    auto scorer = feedback::make_scorer("token_overlap");
    for (const auto& rec : world.logs) {
      auto set = retrieve(index, rec.query, MatchMode::kAnd);
      const double f = relevant_fraction(world.catalog, rec.query, set, scorer, 0.5);
      CHECK((f == 0.0 || f == 1.0));
      CHECK((set.empty() ? f == 0.0 : f == 1.0));
    }
  }

  TEST_CASE("dump lists one line per term") {
    auto cat = tiny_catalog();
    InvertedIndex index(cat);
    const std::string text = index.dump();
    size_t lines = 0;
    for (char c : text)
      if (c == '\n') ++lines;
    CHECK(lines == index.terms().size());
    CHECK(text.find("red\tp1 p2 p5") != std::string::npos);
  }
}
