#include <benchmark/benchmark.h>

#include "longtail/alignment.hpp"
#include "longtail/feedback.hpp"
#include "longtail/lexindex.hpp"
#include "longtail/model.hpp"

namespace {

using namespace longtail;

const corpus::SyntheticWorld& world() {
  static const corpus::SyntheticWorld w = [] {
    corpus::WorldConfig cfg;
    cfg.seed = 11;
    cfg.n_products = 500;
    cfg.n_queries = 200;
    cfg.vocab_size = 80;
    return corpus::generate_synthetic_world(cfg);
  }();
  return w;
}

void bm_build_index(benchmark::State& state) {
  const auto& w = world();
  for (auto _ : state) {
    lexindex::InvertedIndex index = lexindex::build_index(w.catalog);
    benchmark::DoNotOptimize(index.terms().size());
  }
}
BENCHMARK(bm_build_index);

void bm_retrieve(benchmark::State& state) {
  const auto& w = world();
  const lexindex::InvertedIndex index = lexindex::build_index(w.catalog);
  size_t i = 0;
  for (auto _ : state) {
    const auto& q = w.logs[i++ % w.logs.size()].query;
    benchmark::DoNotOptimize(lexindex::retrieve(index, q).size());
  }
}
BENCHMARK(bm_retrieve);

void bm_score_pair(benchmark::State& state) {
  const auto& w = world();
  const lexindex::InvertedIndex index = lexindex::build_index(w.catalog);
  const auto excellent = lexindex::make_set(w.catalog.excellent_ids());
  const feedback::RelevanceConfig cfg;
  size_t i = 0;
  for (auto _ : state) {
    const auto& rec = w.logs[i++ % w.logs.size()];
    const auto transactions = lexindex::make_set(rec.transactions);
    const std::string& rewrite =
        rec.legacy_rewrites.empty() ? rec.query : rec.legacy_rewrites.front();
    benchmark::DoNotOptimize(
        feedback::score_pair(w.catalog, index, rec.query, rewrite, excellent, transactions, cfg));
  }
}
BENCHMARK(bm_score_pair);

void bm_beam_search(benchmark::State& state) {
  const auto& w = world();
  std::vector<std::string> texts;
  for (const auto& rec : w.logs) texts.push_back(rec.query);
  const model::Vocabulary vocab = model::Vocabulary::build(texts);
  model::ModelConfig mc;
  mc.vocab_size = vocab.size();
  const model::ModelParams params = model::ModelParams::init(mc, 3);
  const std::vector<int> prompt = model::encode_prompt(vocab, w.logs.front().query);
  for (auto _ : state)
    benchmark::DoNotOptimize(model::beam_search(params, vocab, prompt, 5, 8).size());
}
BENCHMARK(bm_beam_search);

void bm_sft_grad(benchmark::State& state) {
  const auto& w = world();
  std::vector<std::string> texts;
  for (const auto& rec : w.logs) texts.push_back(rec.query);
  const model::Vocabulary vocab = model::Vocabulary::build(texts);
  model::ModelConfig mc;
  mc.vocab_size = vocab.size();
  const model::ModelParams params = model::ModelParams::init(mc, 3);
  std::vector<model::EncodedExample> batch;
  for (int i = 0; i < 8; ++i)
    batch.push_back(model::encode(vocab, w.logs[i].query, w.logs[i + 8].query));
  model::ModelParams grad = model::ModelParams::zeros(mc);
  for (auto _ : state) {
    std::fill(grad.values().begin(), grad.values().end(), 0.0);
    benchmark::DoNotOptimize(model::sft_loss_grad(params, batch, grad));
  }
}
BENCHMARK(bm_sft_grad);

}  // namespace

BENCHMARK_MAIN();
