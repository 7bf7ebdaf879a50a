#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "longtail/alignment.hpp"
#include "longtail/common.hpp"
#include "longtail/datasetgen.hpp"
#include "longtail/feedback.hpp"
#include "longtail/model.hpp"
#include "support/oracles.hpp"

using namespace longtail;
using namespace longtail::alignment;
using longtail::model::encode;
using longtail::model::ModelConfig;
using longtail::model::ModelParams;
using longtail::model::Vocabulary;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

Vocabulary small_vocab() {
  std::vector<std::string> texts{"aa bb cc dd"};
  return Vocabulary::build(texts);
}

// A two-candidate sample over a handmade prompt, rewards 1.0 and 0.4.
AlignmentSample two_candidate_sample(const Vocabulary& vocab) {
  AlignmentSample s;
  s.query = "aa bb";
  s.objective = "rele";
  Candidate best{"aa bb cc", 1.0, encode(vocab, "aa bb", "aa bb cc")};
  Candidate worse{"dd", 0.4, encode(vocab, "aa bb", "dd")};
  s.candidates = {best, worse};
  return s;
}

}  // namespace

TEST_SUITE("alignment") {
  TEST_CASE("pairwise preference probability") {
    CHECK(bt_probability(0.7, 0.7) == 0.5);
    CHECK(bt_probability(-3.2, -3.2) == 0.5);
    CHECK(bt_probability(std::log(2.0), 0.0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(bt_probability(1000.0, 0.0) > 1.0 - 1e-12);
    CHECK(bt_probability(0.0, 1000.0) < 1e-12);
    for (auto [a, b] : std::vector<std::pair<double, double>>{
             {0.3, -1.2}, {5.0, 5.5}, {-900.0, 900.0}, {2.0, 2.0}}) {
      const double p = bt_probability(a, b);
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
      CHECK(p + bt_probability(b, a) == 1.0);  // exact, not approximate
    }
  }

  TEST_CASE("policy_score is the mean per-token log-probability") {
    auto vocab = small_vocab();
    auto zero = ModelParams::zeros(ModelConfig{vocab.size(), 4, 5});
    auto ex = encode(vocab, "aa", "bb cc");
    CHECK(policy_score(zero, ex.prompt_ids, ex.response_ids) ==
          doctest::Approx(-std::log(double(vocab.size()))).epsilon(1e-12));

    auto params = ModelParams::init(ModelConfig{vocab.size(), 4, 5}, 3);
    auto lp = model::log_prob(params, ex.prompt_ids, ex.response_ids);
    double mean = 0;
    for (double v : lp) mean += v;
    mean /= static_cast<double>(lp.size());
    CHECK(policy_score(params, ex.prompt_ids, ex.response_ids) ==
          doctest::Approx(mean).epsilon(1e-12));
  }

  TEST_CASE("perturb_ties steps tied rewards down") {
    std::vector<double> flat{1.0, 1.0, 1.0};
    CHECK(perturb_ties(flat, 0.1) == 2);
    CHECK(flat == std::vector<double>{1.0, 0.9, 0.8});

    std::vector<double> sorted{3.0, 2.0, 1.0};
    CHECK(perturb_ties(sorted, 0.1) == 0);
    CHECK(sorted == std::vector<double>{3.0, 2.0, 1.0});

    // An equal-or-higher follower snaps to one step below its predecessor.
    std::vector<double> bump{1.0, 1.0, 0.999999999};
    CHECK(perturb_ties(bump, 1e-6) == 2);
    CHECK(bump[0] == 1.0);
    CHECK(bump[1] == doctest::Approx(1.0 - 1e-6).epsilon(1e-12));
    CHECK(bump[2] == doctest::Approx(1.0 - 2e-6).epsilon(1e-12));

    std::vector<double> one{0.5};
    CHECK(perturb_ties(one, 0.1) == 0);
    CHECK_THROWS_WITH(perturb_ties(one, 0.0), "tie epsilon must be positive");
  }

  TEST_CASE("ranking temperatures from reward gaps") {
    // Gaps from the top candidate: 1/(2-1)=1 and 1/(2-0)=0.5; the anchor
    // entry takes the minimum.
    std::vector<double> r1{2.0, 1.0, 0.0};
    CHECK(pro_temperatures(r1, 0) == std::vector<double>{0.5, 1.0, 0.5});

    std::vector<double> r2{0.9, 0.5, 0.4, 0.1};
    auto t2 = pro_temperatures(r2, 1);
    REQUIRE(t2.size() == 4);
    CHECK(t2[0] == 0.0);  // entries above the anchor stay zero
    CHECK(t2[1] == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(t2[2] == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(t2[3] == doctest::Approx(2.5).epsilon(1e-12));

    std::vector<double> pair{1.0, 0.0};
    CHECK(pro_temperatures(pair, 0) == std::vector<double>{1.0, 1.0});

    CHECK_THROWS_WITH(pro_temperatures(pair, 1),
                      "rank index needs at least one lower-ranked candidate");
    std::vector<double> tied{1.0, 1.0};
    CHECK_THROWS_WITH(pro_temperatures(tied, 0),
                      "UnsortedRewards: rewards must be strictly decreasing");
    std::vector<double> rising{0.0, 1.0};
    CHECK_THROWS_WITH(pro_temperatures(rising, 0),
                      "UnsortedRewards: rewards must be strictly decreasing");
  }

  TEST_CASE("ranking loss closed forms") {
    CHECK(pro_loss_from_scores({}, {}) == 0.0);
    std::vector<double> one{0.3}, one_r{1.0};
    CHECK(pro_loss_from_scores(one, one_r) == 0.0);

    // All-zero scores collapse every softmax to a uniform choice.
    std::vector<double> z2{0.0, 0.0}, r2{1.0, 0.0};
    CHECK(pro_loss_from_scores(z2, r2) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    std::vector<double> z3{0.0, 0.0, 0.0}, r3{2.0, 1.0, 0.0};
    CHECK(pro_loss_from_scores(z3, r3) ==
          doctest::Approx(std::log(3.0) + std::log(2.0)).epsilon(1e-12));

    // Two candidates, unit temperature: plain softmax cross-entropy.
    std::vector<double> s{1.0, 0.0};
    CHECK(pro_loss_from_scores(s, r2) ==
          doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
  }

  TEST_CASE("ranking loss cares about reward gaps, not levels") {
    std::vector<double> scores{0.7, 0.1, -0.4, -0.2};
    std::vector<double> rewards{1.9, 1.2, 0.8, 0.1};
    const double base = pro_loss_from_scores(scores, rewards);
    for (double shift : {-5.0, 0.3, 1000.0}) {
      auto shifted = rewards;
      for (double& r : shifted) r += shift;
      CHECK(pro_loss_from_scores(scores, shifted) == doctest::Approx(base).epsilon(1e-9));
    }
  }

  TEST_CASE("ranking loss is nonnegative and rewards agreement") {
    std::vector<double> rewards{2.0, 1.0, 0.5, 0.2};
    std::vector<double> agree{3.0, 2.0, 1.0, 0.0};
    std::vector<double> disagree{0.0, 1.0, 2.0, 3.0};
    const double good = pro_loss_from_scores(agree, rewards);
    const double bad = pro_loss_from_scores(disagree, rewards);
    CHECK(good >= 0.0);
    CHECK(good < bad);

    // Raising the top candidate's score can only help.
    auto bumped = agree;
    bumped[0] += 1.0;
    CHECK(pro_loss_from_scores(bumped, rewards) < good);
  }

  TEST_CASE("ranking score gradient matches finite differences") {
    std::vector<double> scores{0.4, -0.1, 0.2};
    std::vector<double> rewards{1.5, 1.0, 0.25};
    std::vector<double> grad(scores.size(), 0.0);
    const double loss = pro_loss_from_scores_grad(scores, rewards, grad);
    CHECK(loss == doctest::Approx(pro_loss_from_scores(scores, rewards)).epsilon(1e-12));
    const double h = 1e-6;
    for (size_t i = 0; i < scores.size(); ++i) {
      auto up = scores, down = scores;
      up[i] += h;
      down[i] -= h;
      const double fd =
          (pro_loss_from_scores(up, rewards) - pro_loss_from_scores(down, rewards)) / (2 * h);
      CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-6));
    }
  }

  TEST_CASE("sample ranking loss uses policy scores with stored rewards") {
    auto vocab = small_vocab();
    auto params = ModelParams::init(ModelConfig{vocab.size(), 4, 6}, 7);
    auto sample = two_candidate_sample(vocab);
    AlignConfig cfg;

    std::vector<double> scores;
    std::vector<double> rewards;
    for (const auto& c : sample.candidates) {
      scores.push_back(policy_score(params, c.encoded.prompt_ids, c.encoded.response_ids));
      rewards.push_back(c.reward);
    }
    CHECK(pro_loss(params, sample, cfg) ==
          doctest::Approx(pro_loss_from_scores(scores, rewards)).epsilon(1e-12));

    // The policy temperature source replaces rewards with floored scores.
    AlignConfig pol = cfg;
    pol.temperature_source = "policy";
    auto floored = scores;
    for (size_t i = 1; i < floored.size(); ++i)
      if (floored[i] > floored[i - 1] - pol.tie_epsilon)
        floored[i] = floored[i - 1] - pol.tie_epsilon;
    CHECK(pro_loss(params, sample, pol) ==
          doctest::Approx(pro_loss_from_scores(scores, floored)).epsilon(1e-12));

    AlignConfig bad = cfg;
    bad.temperature_source = "offline";
    CHECK_THROWS_WITH(pro_loss(params, sample, bad), "unknown temperature source: offline");

    AlignmentSample empty;
    empty.query = "q";
    CHECK_THROWS_WITH(pro_loss(params, empty, cfg), "sample without candidates");
  }

  TEST_CASE("alignment loss assembles data and ranking terms") {
    auto vocab = small_vocab();
    auto params = ModelParams::init(ModelConfig{vocab.size(), 4, 6}, 9);
    auto sample = two_candidate_sample(vocab);

    double data_all = 0.0;
    for (const auto& c : sample.candidates) {
      for (double v : model::log_prob(params, c.encoded.prompt_ids, c.encoded.response_ids))
        data_all -= v;
    }
    double data_top = 0.0;
    for (double v : model::log_prob(params, sample.candidates[0].encoded.prompt_ids,
                                    sample.candidates[0].encoded.response_ids))
      data_top -= v;

    AlignConfig off;
    off.lambda = 0.0;
    CHECK(align_loss(params, sample, off) == doctest::Approx(data_all).epsilon(1e-12));

    AlignConfig top_only = off;
    top_only.sft_all_candidates = false;
    CHECK(align_loss(params, sample, top_only) == doctest::Approx(data_top).epsilon(1e-12));

    AlignConfig full;
    full.lambda = 0.7;
    CHECK(align_loss(params, sample, full) ==
          doctest::Approx(data_all + 0.7 * pro_loss(params, sample, full)).epsilon(1e-12));

    // A lone candidate has no ranking term at any lambda.
    AlignmentSample solo = sample;
    solo.candidates.resize(1);
    CHECK(align_loss(params, solo, full) == doctest::Approx(data_top).epsilon(1e-12));
  }

  TEST_CASE("alignment gradients match finite differences") {
    auto vocab = small_vocab();
    auto params = ModelParams::init(ModelConfig{vocab.size(), 3, 4}, 11);
    auto sample = two_candidate_sample(vocab);

    for (const char* source : {"feedback", "policy"}) {
      AlignConfig cfg;
      cfg.lambda = 1.3;
      cfg.temperature_source = source;
      ModelParams grad = ModelParams::zeros(params.config());
      const double loss = align_loss_grad(params, sample, cfg, grad);
      CHECK(loss == doctest::Approx(align_loss(params, sample, cfg)).epsilon(1e-12));

      // The policy source draws its temperatures from the live scores but
      // differentiates with them held fixed, so the finite-difference target
      // must freeze the temperature rewards at the base point.
      std::vector<double> frozen;
      for (const auto& c : sample.candidates)
        frozen.push_back(policy_score(params, c.encoded.prompt_ids, c.encoded.response_ids));
      for (size_t i = 1; i < frozen.size(); ++i)
        frozen[i] = std::min(frozen[i], frozen[i - 1] - cfg.tie_epsilon);

      auto target = [&](const ModelParams& p) {
        if (cfg.temperature_source == "feedback") return align_loss(p, sample, cfg);
        double data = 0.0;
        std::vector<double> scores;
        for (const auto& c : sample.candidates) {
          const auto lp = model::log_prob(p, c.encoded.prompt_ids, c.encoded.response_ids);
          double sum = 0.0;
          for (double v : lp) sum += v;
          data -= sum;
          scores.push_back(sum / static_cast<double>(lp.size()));
        }
        return data + cfg.lambda * pro_loss_from_scores(scores, frozen);
      };
      CHECK(target(params) == doctest::Approx(loss).epsilon(1e-12));
      auto numeric = oracles::finite_differences(params, target, 1e-5);
      CHECK(oracles::max_rel_error(grad.values(), numeric, 1e-4) < 1e-5);
    }

    AlignConfig cfg;
    ModelParams grad = ModelParams::zeros(params.config());
    const double loss = pro_loss_grad(params, sample, cfg, grad);
    CHECK(loss == doctest::Approx(pro_loss(params, sample, cfg)).epsilon(1e-12));
    auto numeric = oracles::finite_differences(
        params, [&](const ModelParams& p) { return pro_loss(p, sample, cfg); }, 1e-5);
    CHECK(oracles::max_rel_error(grad.values(), numeric, 1e-4) < 1e-5);
  }

  TEST_CASE("alignment training is seeded and honors a zero rate") {
    auto vocab = small_vocab();
    ModelConfig mcfg{vocab.size(), 4, 6};
    std::vector<AlignmentSample> samples{two_candidate_sample(vocab)};
    {
      AlignmentSample more;
      more.query = "cc";
      more.objective = "rele";
      more.candidates = {{"cc dd", 0.9, encode(vocab, "cc", "cc dd")},
                         {"aa", 0.3, encode(vocab, "cc", "aa")}};
      samples.push_back(std::move(more));
    }

    AlignTrainConfig cfg;
    cfg.lr = 0.01;
    cfg.epochs = 6;
    cfg.batch_size = 2;
    cfg.seed = 3;

    auto p1 = ModelParams::init(mcfg, 1);
    auto t1 = train_align(p1, samples, cfg);
    auto p2 = ModelParams::init(mcfg, 1);
    auto t2 = train_align(p2, samples, cfg);
    CHECK(p1.values() == p2.values());
    REQUIRE(t1.size() == t2.size());
    REQUIRE(t1.size() == 6);  // one batch of two samples per epoch
    for (size_t i = 0; i < t1.size(); ++i) CHECK(t1[i].loss == t2[i].loss);
    CHECK(t1.back().loss < t1.front().loss);

    auto frozen = ModelParams::init(mcfg, 1);
    AlignTrainConfig still = cfg;
    still.lr = 0.0;
    train_align(frozen, samples, still);
    CHECK(frozen.values() == ModelParams::init(mcfg, 1).values());

    CHECK_THROWS_WITH(train_align(p1, {}, cfg), "empty alignment dataset");
    AlignTrainConfig bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS_WITH(train_align(p1, samples, bad), "batch_size must be positive");
  }

  TEST_CASE("kendall tau over policy scores") {
    CHECK(kendall_tau(std::vector<double>{3.0, 2.0, 1.0}) == 1.0);
    CHECK(kendall_tau(std::vector<double>{1.0, 2.0, 3.0}) == -1.0);
    CHECK(kendall_tau(std::vector<double>{2.0, 1.0, 3.0}) ==
          doctest::Approx(-1.0 / 3.0).epsilon(1e-12));
    CHECK(kendall_tau(std::vector<double>{1.0, 1.0}) == 0.0);  // a tie is neither order
    CHECK_THROWS_WITH(kendall_tau(std::vector<double>{1.0}),
                      "tau needs at least two candidates");
  }

  TEST_CASE("mean tau averages multi-candidate samples") {
    auto vocab = small_vocab();
    auto params = ModelParams::init(ModelConfig{vocab.size(), 4, 6}, 13);
    std::vector<AlignmentSample> samples{two_candidate_sample(vocab)};
    {
      AlignmentSample solo;
      solo.query = "dd";
      solo.objective = "rele";
      solo.candidates = {{"dd cc", 0.5, encode(vocab, "dd", "dd cc")}};
      samples.push_back(std::move(solo));  // skipped: nothing to rank
    }
    std::vector<double> per;
    const double mean = mean_policy_reward_tau(params, samples, &per);
    REQUIRE(per.size() == 2);  // one slot per sample; the unrankable one is NaN
    CHECK(mean == per[0]);
    CHECK(std::isnan(per[1]));
    CHECK(mean >= -1.0);
    CHECK(mean <= 1.0);

    std::vector<AlignmentSample> only_solo{samples[1]};
    CHECK_THROWS_WITH(mean_policy_reward_tau(params, only_solo, nullptr),
                      "no samples with at least two candidates");
  }

  TEST_CASE("build_samples truncates, perturbs, and encodes") {
    auto vocab = small_vocab();
    feedback::RankedCandidates list;
    list.query = "aa bb";
    list.objective = feedback::Objective::kRele;
    list.entries = {{"aa bb cc", 1.0}, {"aa bb", 1.0}, {"cc", 0.5}, {"dd", 0.25}};

    std::map<std::string, std::vector<std::string>> titles{
        {"aa bb", {"aa bb cc dd", "dd cc"}}};
    std::vector<feedback::RankedCandidates> lists{list};
    auto samples = build_samples(lists, titles, vocab, 3, 1, 0, 1e-6);
    REQUIRE(samples.size() == 1);
    const auto& s = samples[0];
    CHECK(s.query == "aa bb");
    CHECK(s.objective == "rele");
    REQUIRE(s.candidates.size() == 3);  // truncated to the contrast number
    CHECK(s.candidates[0].rewrite == "aa bb cc");
    CHECK(s.candidates[1].rewrite == "aa bb");
    CHECK(s.candidates[2].rewrite == "cc");
    // The tied top pair separates by one epsilon.
    CHECK(s.candidates[0].reward == 1.0);
    CHECK(s.candidates[1].reward == doctest::Approx(1.0 - 1e-6).epsilon(1e-12));
    CHECK(s.candidates[2].reward == 0.5);

    const std::string prompt = datasetgen::render_rewrite_prompt(
        "aa bb", std::vector<std::string>{"aa bb cc dd", "dd cc"}, 1);
    const auto want = encode(vocab, prompt, "aa bb cc");
    CHECK(s.candidates[0].encoded.prompt_ids == want.prompt_ids);
    CHECK(s.candidates[0].encoded.response_ids == want.response_ids);
    CHECK(s.candidates[0].encoded.mask == want.mask);

    // Unknown queries encode with no title block; empty lists drop.
    feedback::RankedCandidates bare;
    bare.query = "cc";
    bare.objective = feedback::Objective::kRele;
    bare.entries = {{"dd", 0.5}};
    feedback::RankedCandidates hollow;
    hollow.query = "dd";
    hollow.objective = feedback::Objective::kRele;
    std::vector<feedback::RankedCandidates> mixed{bare, hollow};
    auto out = build_samples(mixed, {}, vocab, 4, 1, 0, 1e-6);
    REQUIRE(out.size() == 1);
    CHECK(out[0].query == "cc");
    const auto bare_want = encode(vocab, datasetgen::render_rewrite_prompt("cc", {}, 1), "dd");
    CHECK(out[0].candidates[0].encoded.prompt_ids == bare_want.prompt_ids);

    CHECK_THROWS_WITH(build_samples(lists, titles, vocab, 0, 1, 0, 1e-6),
                      "contrast number must be positive");
  }

  TEST_CASE("sample rows round-trip through their file") {
    std::vector<SampleRow> rows{
        {"aa bb", {{"aa bb cc", 1.0}, {"dd", 0.25}}, "rele"},
        {"cc", {{"cc dd", 0.75}}, "incr"},
    };
    const std::string path = temp_path("longtail_samples_rt.jsonl");
    save_sample_rows(path, rows);
    auto back = load_sample_rows(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].query == "aa bb");
    REQUIRE(back[0].candidates.size() == 2);
    CHECK(back[0].candidates[0].first == "aa bb cc");
    CHECK(back[0].candidates[0].second == 1.0);
    CHECK(back[0].objective == "rele");
    CHECK(back[1].candidates.size() == 1);

    // save_samples writes the same shape.
    auto vocab = small_vocab();
    std::vector<AlignmentSample> samples{two_candidate_sample(vocab)};
    save_samples(path, samples);
    auto from_samples = load_sample_rows(path);
    REQUIRE(from_samples.size() == 1);
    CHECK(from_samples[0].query == "aa bb");
    REQUIRE(from_samples[0].candidates.size() == 2);
    CHECK(from_samples[0].candidates[0].first == "aa bb cc");
    CHECK(from_samples[0].candidates[0].second == 1.0);

    write_file_atomic(path, "{\"query\":\"q\",\"candidates\":[],\"objective\":\"rele\"}\nnot json\n");
    CHECK_THROWS_WITH(load_sample_rows(path), doctest::Contains("parse error at"));
    write_file_atomic(path, "{\"query\":\"q\",\"candidates\":[[\"r\",1.0]],\"objective\":\"rele\",\"extra\":0}\n");
    CHECK_THROWS_WITH(load_sample_rows(path), doctest::Contains("unknown field \"extra\""));
    std::filesystem::remove(path);
  }
}
