#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "longtail/model.hpp"

namespace longtail::alignment {

// Probability that the first response beats the second under their rewards.
// Stable for any finite inputs; bt_probability(r, r) is exactly 0.5 and
// bt_probability(a, b) + bt_probability(b, a) is exactly 1.
double bt_probability(double r1, double r2);

// Length-normalized sequence log-probability: mean per-token conditional
// log-probability over the response, terminal token included.
double policy_score(const model::ModelParams& params, std::span<const int> prompt_ids,
                    std::span<const int> response_ids);

struct Candidate {
  std::string rewrite;
  double reward = 0.0;
  model::EncodedExample encoded;
};

struct AlignmentSample {
  std::string query;
  // Reward descending; strictly decreasing after tie perturbation.
  std::vector<Candidate> candidates;
  std::string objective;
};

// Replaces runs of tied (or out-of-order-equal) rewards with values stepped
// down by multiples of epsilon so every adjacent gap is positive. Input must
// be sorted descending. Returns the number of adjusted entries.
int perturb_ties(std::vector<double>& rewards, double epsilon);

// Temperatures for ranking step k (0-based): entry i holds 1/(r_k - r_i) for
// i > k, and min over those at entry k itself. Rewards must be strictly
// decreasing; throws otherwise.
std::vector<double> pro_temperatures(std::span<const double> rewards, size_t k);

// Ranking loss over policy scores with reward-gap temperatures. Zero when
// fewer than two candidates. Sensitive only to reward gaps, not their level.
double pro_loss_from_scores(std::span<const double> scores, std::span<const double> rewards);
// Adds d(loss)/d(score_i) into score_grad (same length as scores).
double pro_loss_from_scores_grad(std::span<const double> scores, std::span<const double> rewards,
                                 std::span<double> score_grad);

struct AlignConfig {
  double lambda = 1.0;
  double tie_epsilon = 1e-6;
  // When false, only the top candidate contributes the data term.
  bool sft_all_candidates = true;
  // "feedback" uses offline rewards inside the temperatures; "policy" uses
  // the model's own scores over the reward-sorted order, gaps floored at
  // tie_epsilon.
  std::string temperature_source = "feedback";
};

double pro_loss(const model::ModelParams& params, const AlignmentSample& sample,
                const AlignConfig& cfg);
double pro_loss_grad(const model::ModelParams& params, const AlignmentSample& sample,
                     const AlignConfig& cfg, model::ModelParams& grad);

// Data term summed over candidates (every candidate treated as gold) plus
// lambda times the ranking term.
double align_loss(const model::ModelParams& params, const AlignmentSample& sample,
                  const AlignConfig& cfg);
double align_loss_grad(const model::ModelParams& params, const AlignmentSample& sample,
                       const AlignConfig& cfg, model::ModelParams& grad);

struct AlignTrainConfig {
  AlignConfig align;
  double lr = 0.005;
  int epochs = 4;
  int batch_size = 4;
  uint64_t seed = 1;
  double weight_decay = 0.0;
};

// Seeded minibatch AdamW over alignment samples; loss per step is the batch
// mean of align_loss. Deterministic given the seed; aborts on non-finite loss.
std::vector<model::TraceEntry> train_align(model::ModelParams& params,
                                           std::span<const AlignmentSample> samples,
                                           const AlignTrainConfig& cfg);

// Kendall tau-a between the candidate order induced by policy scores and the
// stored reward order. Lists need at least two candidates.
double kendall_tau(std::span<const double> policy_scores);
double mean_policy_reward_tau(const model::ModelParams& params,
                              std::span<const AlignmentSample> samples,
                              std::vector<double>* per_sample = nullptr);

// Builds samples from ranked candidate lists: encodes each candidate against
// the rewrite prompt, truncates to contrast_number entries, perturbs reward
// ties. Lists with fewer than one usable candidate are dropped.
std::vector<AlignmentSample> build_samples(
    std::span<const feedback::RankedCandidates> lists,
    const std::map<std::string, std::vector<std::string>>& interacted_titles,
    const model::Vocabulary& vocab, int contrast_number, int k_titles, int max_prompt_tokens,
    double tie_epsilon);

// Line-delimited {query, candidates: [[text, reward]...], objective}.
void save_samples(const std::string& path, std::span<const AlignmentSample> samples);
struct SampleRow {
  std::string query;
  std::vector<std::pair<std::string, double>> candidates;
  std::string objective;
};
std::vector<SampleRow> load_sample_rows(const std::string& path);
void save_sample_rows(const std::string& path, std::span<const SampleRow> rows);

}  // namespace longtail::alignment
