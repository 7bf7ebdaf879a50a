#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "longtail/datasetgen.hpp"

namespace longtail::model {

// Token inventory with reserved specials at fixed ids. Real tokens start at
// id 4, ordered by frequency descending then token ascending.
class Vocabulary {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kPad = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumReserved = 4;

  static Vocabulary build(std::span<const std::string> texts, int min_count = 1);

  int size() const { return static_cast<int>(tokens_.size()); }
  int id_of(std::string_view token) const;  // kUnk when absent
  const std::string& token(int id) const;
  // Tokenizes and maps; unseen tokens become kUnk.
  std::vector<int> encode_text(std::string_view text) const;
  // Joins real tokens with spaces; specials are skipped.
  std::string decode(std::span<const int> ids) const;
  // FNV over the ordered token list; binds checkpoints to their vocabulary.
  uint64_t hash() const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  Vocabulary() = default;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct ModelConfig {
  int vocab_size = 0;
  int embed_dim = 16;
  int hidden_dim = 32;
};

// Recurrent autoregressive token model: embedding, tanh recurrence, output
// projection. Parameters live in one flat double array so the optimizer,
// checkpoints, and finite-difference checks all see the same layout.
class ModelParams {
 public:
  static ModelParams zeros(const ModelConfig& cfg);
  static ModelParams init(const ModelConfig& cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  size_t count() const { return values_.size(); }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  // Flat-array offsets for each block.
  size_t emb_off() const;    // vocab_size x embed_dim
  size_t w_xh_off() const;   // hidden_dim x embed_dim
  size_t w_hh_off() const;   // hidden_dim x hidden_dim
  size_t b_h_off() const;    // hidden_dim
  size_t w_hy_off() const;   // vocab_size x hidden_dim
  size_t b_y_off() const;    // vocab_size

 private:
  explicit ModelParams(const ModelConfig& cfg);
  ModelConfig cfg_;
  std::vector<double> values_;
};

struct EncodedExample {
  std::vector<int> prompt_ids;    // starts with kBos
  std::vector<int> response_ids;  // ends with kEos
  std::vector<uint8_t> mask;      // over prompt+response; 0 on prompt, 1 on response
};

// kBos followed by the prompt's token ids, truncated to max_prompt_tokens
// tokens first (0 disables the cap).
std::vector<int> encode_prompt(const Vocabulary& vocab, std::string_view prompt,
                               int max_prompt_tokens = 0);

// encode_prompt plus the response's ids with kEos appended, and the matching
// prompt/response mask.
EncodedExample encode(const Vocabulary& vocab, std::string_view prompt, std::string_view response,
                      int max_prompt_tokens = 0);

// Per-token conditional log-probabilities of the response given the prompt,
// teacher-forced. Length equals response_ids.size(); every entry <= 0.
std::vector<double> log_prob(const ModelParams& params, std::span<const int> prompt_ids,
                             std::span<const int> response_ids);

// Same forward pass; additionally accumulates d(sum_j coeffs[j] * nll_j)/dθ
// into grad. coeffs has one entry per response position.
std::vector<double> log_prob_grad(const ModelParams& params, std::span<const int> prompt_ids,
                                  std::span<const int> response_ids,
                                  std::span<const double> coeffs, ModelParams& grad);

struct SftOptions {
  // When set, each example's summed loss is divided by its response length.
  bool average_tokens = false;
};

// Mean over the batch of the summed negative log-probabilities at masked-in
// positions. Prompt positions carry mask 0 and contribute nothing.
double sft_loss(const ModelParams& params, std::span<const EncodedExample> batch,
                const SftOptions& opts = {});
double sft_loss_grad(const ModelParams& params, std::span<const EncodedExample> batch,
                     ModelParams& grad, const SftOptions& opts = {});

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class AdamW {
 public:
  AdamW(const AdamWConfig& cfg, size_t param_count);
  void step(ModelParams& params, const ModelParams& grad);

 private:
  AdamWConfig cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  int64_t t_ = 0;
};

struct TrainConfig {
  double lr = 0.01;
  int epochs = 20;
  int batch_size = 8;
  uint64_t seed = 1;
  double weight_decay = 0.0;
  SftOptions sft;
};

struct TraceEntry {
  int64_t step = 0;
  double loss = 0.0;
};

// Seeded minibatch AdamW over the encoded dataset. Deterministic given the
// seed; aborts on non-finite loss.
std::vector<TraceEntry> train_sft(ModelParams& params, std::span<const EncodedExample> dataset,
                                  const TrainConfig& cfg);

// Incremental decoding state for beam search.
struct DecoderState {
  std::vector<double> h;
};

DecoderState prime(const ModelParams& params, std::span<const int> prompt_ids);
DecoderState advance(const ModelParams& params, const DecoderState& state, int token_id);
// Full log-distribution over the vocabulary from the current state.
std::vector<double> token_log_probs(const ModelParams& params, const DecoderState& state);

struct BeamCandidate {
  std::string text;
  std::vector<int> ids;  // response ids; kEos-terminated unless cut at max_len
  double score = 0.0;    // summed log-probability / length
};

// Length-normalized beam search over real tokens plus kEos. Returns at most
// beam_width candidates, deduplicated by surface text, ordered by score
// descending then text ascending. Width 1 is the greedy argmax decode.
std::vector<BeamCandidate> beam_search(const ModelParams& params, const Vocabulary& vocab,
                                       std::span<const int> prompt_ids, int beam_width,
                                       int max_len);

void save_checkpoint(const std::string& path, const ModelParams& params, uint64_t vocab_hash);
struct Checkpoint {
  ModelConfig config;
  std::vector<double> values;
  uint64_t vocab_hash = 0;
};
Checkpoint load_checkpoint(const std::string& path);
ModelParams params_from_checkpoint(const Checkpoint& ckpt);

void save_trace(const std::string& path, std::span<const TraceEntry> trace);

}  // namespace longtail::model
