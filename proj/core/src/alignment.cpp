#include "longtail/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "longtail/common.hpp"
#include "longtail/rng.hpp"

namespace longtail::alignment {

using nlohmann::json;

double bt_probability(double r1, double r2) {
  // Evaluated with the larger reward in the stable slot so the exponent never
  // overflows and the two orientations sum to 1 exactly.
  if (r1 >= r2) return 1.0 / (1.0 + std::exp(r2 - r1));
  return 1.0 - 1.0 / (1.0 + std::exp(r1 - r2));
}

double policy_score(const model::ModelParams& params, std::span<const int> prompt_ids,
                    std::span<const int> response_ids) {
  const std::vector<double> lp = model::log_prob(params, prompt_ids, response_ids);
  double sum = 0.0;
  for (double x : lp) sum += x;
  return sum / static_cast<double>(lp.size());
}

int perturb_ties(std::vector<double>& rewards, double epsilon) {
  if (epsilon <= 0.0) throw std::invalid_argument("tie epsilon must be positive");
  int adjusted = 0;
  for (size_t i = 1; i < rewards.size(); ++i) {
    if (rewards[i] >= rewards[i - 1]) {
      rewards[i] = rewards[i - 1] - epsilon;
      ++adjusted;
    }
  }
  return adjusted;
}

std::vector<double> pro_temperatures(std::span<const double> rewards, size_t k) {
  const size_t n = rewards.size();
  for (size_t i = 1; i < n; ++i)
    if (!(rewards[i] < rewards[i - 1]))
      throw std::invalid_argument("UnsortedRewards: rewards must be strictly decreasing");
  if (k + 1 >= n)
    throw std::invalid_argument("rank index needs at least one lower-ranked candidate");
  std::vector<double> out(n, 0.0);
  double min_t = 0.0;
  for (size_t i = k + 1; i < n; ++i) {
    out[i] = 1.0 / (rewards[k] - rewards[i]);
    if (i == k + 1 || out[i] < min_t) min_t = out[i];
  }
  out[k] = min_t;
  return out;
}

double pro_loss_from_scores(std::span<const double> scores, std::span<const double> rewards) {
  return pro_loss_from_scores_grad(scores, rewards, {});
}

double pro_loss_from_scores_grad(std::span<const double> scores, std::span<const double> rewards,
                                 std::span<double> score_grad) {
  const size_t n = scores.size();
  if (rewards.size() != n) throw std::invalid_argument("scores and rewards must align");
  if (!score_grad.empty() && score_grad.size() != n)
    throw std::invalid_argument("score gradient must align with scores");
  if (n < 2) return 0.0;
  for (size_t i = 1; i < n; ++i)
    if (!(rewards[i] < rewards[i - 1]))
      throw std::invalid_argument("UnsortedRewards: rewards must be strictly decreasing");

  double loss = 0.0;
  std::vector<double> z(n), p(n);
  for (size_t k = 0; k + 1 < n; ++k) {
    const std::vector<double> temps = pro_temperatures(rewards, k);
    for (size_t i = k; i < n; ++i) z[i] = scores[i] / temps[i];
    double mx = z[k];
    for (size_t i = k + 1; i < n; ++i) mx = std::max(mx, z[i]);
    double sum = 0.0;
    for (size_t i = k; i < n; ++i) sum += std::exp(z[i] - mx);
    const double lse = mx + std::log(sum);
    loss += lse - z[k];
    if (!score_grad.empty()) {
      for (size_t i = k; i < n; ++i) p[i] = std::exp(z[i] - lse);
      for (size_t i = k; i < n; ++i)
        score_grad[i] += (p[i] - (i == k ? 1.0 : 0.0)) / temps[i];
    }
  }
  return loss;
}

namespace {

std::vector<double> candidate_scores(const model::ModelParams& params,
                                     const AlignmentSample& sample) {
  std::vector<double> scores;
  scores.reserve(sample.candidates.size());
  for (const Candidate& c : sample.candidates)
    scores.push_back(policy_score(params, c.encoded.prompt_ids, c.encoded.response_ids));
  return scores;
}

// Rewards entering the temperatures. "feedback" uses the stored offline
// rewards; "policy" reuses the model's scores in reward order, each gap
// floored at tie_epsilon so the sequence stays strictly decreasing. Either
// way the result is treated as constant when differentiating.
std::vector<double> temperature_rewards(const AlignmentSample& sample,
                                        std::span<const double> scores, const AlignConfig& cfg) {
  if (cfg.temperature_source == "feedback") {
    std::vector<double> r;
    r.reserve(sample.candidates.size());
    for (const Candidate& c : sample.candidates) r.push_back(c.reward);
    return r;
  }
  if (cfg.temperature_source == "policy") {
    std::vector<double> r(scores.begin(), scores.end());
    for (size_t i = 1; i < r.size(); ++i)
      if (r[i] > r[i - 1] - cfg.tie_epsilon) r[i] = r[i - 1] - cfg.tie_epsilon;
    return r;
  }
  throw std::invalid_argument("unknown temperature source: " + cfg.temperature_source);
}

void check_sample(const AlignmentSample& sample) {
  if (sample.candidates.empty()) throw std::invalid_argument("sample without candidates");
}

}  // namespace

double pro_loss(const model::ModelParams& params, const AlignmentSample& sample,
                const AlignConfig& cfg) {
  check_sample(sample);
  if (sample.candidates.size() < 2) return 0.0;
  const std::vector<double> scores = candidate_scores(params, sample);
  return pro_loss_from_scores(scores, temperature_rewards(sample, scores, cfg));
}

double pro_loss_grad(const model::ModelParams& params, const AlignmentSample& sample,
                     const AlignConfig& cfg, model::ModelParams& grad) {
  check_sample(sample);
  if (sample.candidates.size() < 2) return 0.0;
  const std::vector<double> scores = candidate_scores(params, sample);
  std::vector<double> score_grad(scores.size(), 0.0);
  const double loss =
      pro_loss_from_scores_grad(scores, temperature_rewards(sample, scores, cfg), score_grad);
  std::vector<double> coeffs;
  for (size_t i = 0; i < sample.candidates.size(); ++i) {
    if (score_grad[i] == 0.0) continue;
    const Candidate& c = sample.candidates[i];
    const double len = static_cast<double>(c.encoded.response_ids.size());
    coeffs.assign(c.encoded.response_ids.size(), -score_grad[i] / len);
    model::log_prob_grad(params, c.encoded.prompt_ids, c.encoded.response_ids, coeffs, grad);
  }
  return loss;
}

namespace {

// Per-candidate summed log-probabilities and their length-normalized scores,
// computed once so the loss and its gradient share identical arithmetic.
void candidate_sums(const model::ModelParams& params, const AlignmentSample& sample,
                    std::vector<double>& sums, std::vector<double>& scores) {
  sums.clear();
  scores.clear();
  for (const Candidate& c : sample.candidates) {
    const std::vector<double> lp =
        model::log_prob(params, c.encoded.prompt_ids, c.encoded.response_ids);
    double s = 0.0;
    for (double x : lp) s += x;
    sums.push_back(s);
    scores.push_back(s / static_cast<double>(lp.size()));
  }
}

}  // namespace

double align_loss(const model::ModelParams& params, const AlignmentSample& sample,
                  const AlignConfig& cfg) {
  check_sample(sample);
  std::vector<double> sums, scores;
  candidate_sums(params, sample, sums, scores);

  const size_t gold = cfg.sft_all_candidates ? sample.candidates.size() : 1;
  double data = 0.0;
  for (size_t i = 0; i < gold; ++i) data -= sums[i];

  double ranking = 0.0;
  if (sample.candidates.size() >= 2)
    ranking = pro_loss_from_scores(scores, temperature_rewards(sample, scores, cfg));
  return data + cfg.lambda * ranking;
}

double align_loss_grad(const model::ModelParams& params, const AlignmentSample& sample,
                       const AlignConfig& cfg, model::ModelParams& grad) {
  check_sample(sample);
  const size_t n = sample.candidates.size();
  std::vector<double> sums, scores;
  candidate_sums(params, sample, sums, scores);

  std::vector<double> score_grad(n, 0.0);
  double ranking = 0.0;
  if (n >= 2)
    ranking =
        pro_loss_from_scores_grad(scores, temperature_rewards(sample, scores, cfg), score_grad);

  const size_t gold = cfg.sft_all_candidates ? n : 1;
  double data = 0.0;
  std::vector<double> coeffs;
  for (size_t i = 0; i < n; ++i) {
    const Candidate& c = sample.candidates[i];
    const double len = static_cast<double>(c.encoded.response_ids.size());
    const double sft_coeff = i < gold ? 1.0 : 0.0;
    const double rank_coeff = -cfg.lambda * score_grad[i] / len;
    if (i < gold) data -= sums[i];
    if (sft_coeff == 0.0 && rank_coeff == 0.0) continue;
    coeffs.assign(c.encoded.response_ids.size(), sft_coeff + rank_coeff);
    model::log_prob_grad(params, c.encoded.prompt_ids, c.encoded.response_ids, coeffs, grad);
  }
  return data + cfg.lambda * ranking;
}

std::vector<model::TraceEntry> train_align(model::ModelParams& params,
                                           std::span<const AlignmentSample> samples,
                                           const AlignTrainConfig& cfg) {
  if (samples.empty()) throw std::invalid_argument("empty alignment dataset");
  if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be positive");

  model::AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  opt_cfg.weight_decay = cfg.weight_decay;
  model::AdamW opt(opt_cfg, params.count());

  Rng rng(cfg.seed);
  std::vector<size_t> order(samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<model::TraceEntry> trace;
  int64_t step_index = 0;
  model::ModelParams grad = model::ModelParams::zeros(params.config());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::fill(grad.values().begin(), grad.values().end(), 0.0);
      double loss = 0.0;
      for (size_t i = start; i < end; ++i)
        loss += align_loss_grad(params, samples[order[i]], cfg.align, grad);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      loss *= inv_b;
      for (double& g : grad.values()) g *= inv_b;
      if (!std::isfinite(loss))
        throw std::runtime_error("non-finite loss at step " + std::to_string(step_index));
      opt.step(params, grad);
      trace.push_back(model::TraceEntry{step_index, loss});
      step_index += 1;
    }
  }
  return trace;
}

double kendall_tau(std::span<const double> policy_scores) {
  const size_t n = policy_scores.size();
  if (n < 2) throw std::invalid_argument("tau needs at least two candidates");
  int64_t concordant = 0, discordant = 0;
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) {
      if (policy_scores[i] > policy_scores[j]) ++concordant;
      else if (policy_scores[i] < policy_scores[j]) ++discordant;
    }
  const double pairs = static_cast<double>(n * (n - 1) / 2);
  return static_cast<double>(concordant - discordant) / pairs;
}

double mean_policy_reward_tau(const model::ModelParams& params,
                              std::span<const AlignmentSample> samples,
                              std::vector<double>* per_sample) {
  if (per_sample) per_sample->clear();
  double sum = 0.0;
  int64_t used = 0;
  for (const AlignmentSample& sample : samples) {
    if (sample.candidates.size() < 2) {
      if (per_sample) per_sample->push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double tau = kendall_tau(candidate_scores(params, sample));
    if (per_sample) per_sample->push_back(tau);
    sum += tau;
    ++used;
  }
  if (used == 0) throw std::runtime_error("no samples with at least two candidates");
  return sum / static_cast<double>(used);
}

std::vector<AlignmentSample> build_samples(
    std::span<const feedback::RankedCandidates> lists,
    const std::map<std::string, std::vector<std::string>>& interacted_titles,
    const model::Vocabulary& vocab, int contrast_number, int k_titles, int max_prompt_tokens,
    double tie_epsilon) {
  if (contrast_number < 1) throw std::invalid_argument("contrast number must be positive");
  std::vector<AlignmentSample> samples;
  for (const feedback::RankedCandidates& list : lists) {
    if (list.entries.empty()) continue;
    AlignmentSample sample;
    sample.query = list.query;
    sample.objective = std::string(feedback::objective_name(list.objective));

    std::vector<double> rewards;
    const size_t take = std::min(list.entries.size(), static_cast<size_t>(contrast_number));
    for (size_t i = 0; i < take; ++i) rewards.push_back(list.entries[i].reward);
    perturb_ties(rewards, tie_epsilon);

    auto titles_it = interacted_titles.find(list.query);
    const std::span<const std::string> titles =
        titles_it == interacted_titles.end() ? std::span<const std::string>()
                                             : std::span<const std::string>(titles_it->second);
    const std::string prompt = datasetgen::render_rewrite_prompt(list.query, titles, k_titles);

    for (size_t i = 0; i < take; ++i) {
      Candidate c;
      c.rewrite = list.entries[i].rewrite;
      c.reward = rewards[i];
      c.encoded = model::encode(vocab, prompt, c.rewrite, max_prompt_tokens);
      sample.candidates.push_back(std::move(c));
    }
    samples.push_back(std::move(sample));
  }
  return samples;
}

void save_samples(const std::string& path, std::span<const AlignmentSample> samples) {
  std::ostringstream out;
  for (const AlignmentSample& s : samples) {
    json cands = json::array();
    for (const Candidate& c : s.candidates) cands.push_back(json::array({c.rewrite, c.reward}));
    json j;
    j["query"] = s.query;
    j["candidates"] = std::move(cands);
    j["objective"] = s.objective;
    out << j.dump() << "\n";
  }
  write_file_atomic(path, out.str());
}

std::vector<SampleRow> load_sample_rows(const std::string& path) {
  const auto lines = read_lines(path);
  std::vector<SampleRow> rows;
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
      static const std::set<std::string> allowed = {"query", "candidates", "objective"};
      if (!allowed.count(item.key()))
        throw std::runtime_error("unknown field \"" + item.key() + "\" at " + path + ":" +
                                 std::to_string(i + 1));
    }
    SampleRow r;
    r.query = j.at("query").get<std::string>();
    r.objective = j.at("objective").get<std::string>();
    const json& cands = j.at("candidates");
    if (!cands.is_array())
      throw std::runtime_error("candidates at " + path + ":" + std::to_string(i + 1) +
                               " is not an array");
    for (const json& pair : cands) {
      if (!pair.is_array() || pair.size() != 2)
        throw std::runtime_error("candidate entry at " + path + ":" + std::to_string(i + 1) +
                                 " is not a [text, reward] pair");
      r.candidates.emplace_back(pair[0].get<std::string>(), pair[1].get<double>());
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

void save_sample_rows(const std::string& path, std::span<const SampleRow> rows) {
  std::ostringstream out;
  for (const SampleRow& s : rows) {
    json cands = json::array();
    for (const auto& [text, reward] : s.candidates) cands.push_back(json::array({text, reward}));
    json j;
    j["query"] = s.query;
    j["candidates"] = std::move(cands);
    j["objective"] = s.objective;
    out << j.dump() << "\n";
  }
  write_file_atomic(path, out.str());
}

}  // namespace longtail::alignment
