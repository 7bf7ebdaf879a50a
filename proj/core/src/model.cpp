#include "longtail/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "longtail/common.hpp"
#include "longtail/rng.hpp"

namespace longtail::model {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary Vocabulary::build(std::span<const std::string> texts, int min_count) {
  if (min_count < 1) throw std::invalid_argument("min_count must be at least 1");
  std::map<std::string, int64_t> counts;
  for (const std::string& text : texts)
    for (const std::string& tok : corpus::tokenize(text)) counts[tok] += 1;

  std::vector<std::pair<std::string, int64_t>> kept;
  for (const auto& [tok, n] : counts)
    if (n >= min_count) kept.emplace_back(tok, n);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  v.tokens_ = {"<bos>", "<eos>", "<pad>", "<unk>"};
  for (auto& [tok, n] : kept) v.tokens_.push_back(std::move(tok));
  for (int i = 0; i < static_cast<int>(v.tokens_.size()); ++i)
    v.ids_[v.tokens_[static_cast<size_t>(i)]] = i;
  return v;
}

int Vocabulary::id_of(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
  return tokens_[static_cast<size_t>(id)];
}

std::vector<int> Vocabulary::encode_text(std::string_view text) const {
  std::vector<int> out;
  for (const std::string& tok : corpus::tokenize(text)) out.push_back(id_of(tok));
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> toks;
  for (int id : ids)
    if (id >= kNumReserved) toks.push_back(token(id));
  return join(toks, " ");
}

uint64_t Vocabulary::hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const std::string& t : tokens_) {
    h = fnv1a(t, h);
    h = fnv1a("\n", h);
  }
  return h;
}

void Vocabulary::save(const std::string& path) const {
  std::ostringstream out;
  out << "# vocab v1\n";
  for (size_t i = kNumReserved; i < tokens_.size(); ++i) out << tokens_[i] << "\n";
  write_file_atomic(path, out.str());
}

Vocabulary Vocabulary::load(const std::string& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || lines[0] != "# vocab v1")
    throw std::runtime_error("bad vocabulary header in " + path);
  Vocabulary v;
  v.tokens_ = {"<bos>", "<eos>", "<pad>", "<unk>"};
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    v.tokens_.push_back(lines[i]);
  }
  for (int i = 0; i < static_cast<int>(v.tokens_.size()); ++i)
    v.ids_[v.tokens_[static_cast<size_t>(i)]] = i;
  return v;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

size_t param_count(const ModelConfig& c) {
  const size_t V = static_cast<size_t>(c.vocab_size);
  const size_t D = static_cast<size_t>(c.embed_dim);
  const size_t H = static_cast<size_t>(c.hidden_dim);
  return V * D + H * D + H * H + H + V * H + V;
}

void check_config(const ModelConfig& c) {
  if (c.vocab_size < Vocabulary::kNumReserved)
    throw std::invalid_argument("vocab_size must cover the reserved tokens");
  if (c.embed_dim < 1 || c.hidden_dim < 1)
    throw std::invalid_argument("embed_dim and hidden_dim must be positive");
}

}  // namespace

ModelParams::ModelParams(const ModelConfig& cfg) : cfg_(cfg) {
  check_config(cfg);
  values_.assign(param_count(cfg), 0.0);
}

ModelParams ModelParams::zeros(const ModelConfig& cfg) { return ModelParams(cfg); }

ModelParams ModelParams::init(const ModelConfig& cfg, uint64_t seed) {
  ModelParams p(cfg);
  Rng rng(seed);
  const double scale = 0.1;
  for (double& v : p.values_) v = rng.normal(0.0, scale);
  return p;
}

size_t ModelParams::emb_off() const { return 0; }
size_t ModelParams::w_xh_off() const {
  return static_cast<size_t>(cfg_.vocab_size) * cfg_.embed_dim;
}
size_t ModelParams::w_hh_off() const {
  return w_xh_off() + static_cast<size_t>(cfg_.hidden_dim) * cfg_.embed_dim;
}
size_t ModelParams::b_h_off() const {
  return w_hh_off() + static_cast<size_t>(cfg_.hidden_dim) * cfg_.hidden_dim;
}
size_t ModelParams::w_hy_off() const { return b_h_off() + static_cast<size_t>(cfg_.hidden_dim); }
size_t ModelParams::b_y_off() const {
  return w_hy_off() + static_cast<size_t>(cfg_.vocab_size) * cfg_.hidden_dim;
}

// ---------------------------------------------------------------------------
// Encoding

std::vector<int> encode_prompt(const Vocabulary& vocab, std::string_view prompt,
                               int max_prompt_tokens) {
  std::vector<int> toks = vocab.encode_text(prompt);
  if (max_prompt_tokens > 0 && static_cast<int>(toks.size()) > max_prompt_tokens)
    toks.resize(static_cast<size_t>(max_prompt_tokens));
  std::vector<int> out;
  out.reserve(toks.size() + 1);
  out.push_back(Vocabulary::kBos);
  out.insert(out.end(), toks.begin(), toks.end());
  return out;
}

EncodedExample encode(const Vocabulary& vocab, std::string_view prompt, std::string_view response,
                      int max_prompt_tokens) {
  EncodedExample ex;
  ex.prompt_ids = encode_prompt(vocab, prompt, max_prompt_tokens);
  ex.response_ids = vocab.encode_text(response);
  ex.response_ids.push_back(Vocabulary::kEos);
  ex.mask.assign(ex.prompt_ids.size(), 0);
  ex.mask.insert(ex.mask.end(), ex.response_ids.size(), 1);
  return ex;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct Views {
  const double* emb;
  const double* w_xh;
  const double* w_hh;
  const double* b_h;
  const double* w_hy;
  const double* b_y;
  int V, D, H;
};

Views views_of(const ModelParams& p) {
  const double* base = p.data();
  return Views{base + p.emb_off(), base + p.w_xh_off(), base + p.w_hh_off(),
               base + p.b_h_off(), base + p.w_hy_off(), base + p.b_y_off(),
               p.config().vocab_size, p.config().embed_dim, p.config().hidden_dim};
}

void check_ids(std::span<const int> ids, int vocab_size, const char* what) {
  for (int id : ids)
    if (id < 0 || id >= vocab_size)
      throw std::invalid_argument(std::string(what) + " id out of vocabulary range");
}

// h_next = tanh(W_xh e_u + W_hh h_prev + b_h); h_prev may be null for h_{-1}=0.
void step_hidden(const Views& m, const double* h_prev, int u, double* h_out) {
  const double* e = m.emb + static_cast<size_t>(u) * m.D;
  for (int i = 0; i < m.H; ++i) {
    double a = m.b_h[i];
    const double* wx = m.w_xh + static_cast<size_t>(i) * m.D;
    for (int k = 0; k < m.D; ++k) a += wx[k] * e[k];
    if (h_prev) {
      const double* wh = m.w_hh + static_cast<size_t>(i) * m.H;
      for (int k = 0; k < m.H; ++k) a += wh[k] * h_prev[k];
    }
    h_out[i] = std::tanh(a);
  }
}

void logits_from_hidden(const Views& m, const double* h, double* logits_out) {
  for (int v = 0; v < m.V; ++v) {
    double a = m.b_y[v];
    const double* w = m.w_hy + static_cast<size_t>(v) * m.H;
    for (int k = 0; k < m.H; ++k) a += w[k] * h[k];
    logits_out[v] = a;
  }
}

double log_sum_exp(const double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(x[i] - mx);
  return mx + std::log(s);
}

void validate_sequences(const ModelParams& params, std::span<const int> prompt_ids,
                        std::span<const int> response_ids) {
  if (prompt_ids.empty()) throw std::invalid_argument("prompt ids must be non-empty");
  if (response_ids.empty()) throw std::invalid_argument("response ids must be non-empty");
  if (response_ids.back() != Vocabulary::kEos)
    throw std::invalid_argument("response ids must end with <eos>");
  check_ids(prompt_ids, params.config().vocab_size, "prompt");
  check_ids(response_ids, params.config().vocab_size, "response");
}

}  // namespace

std::vector<double> log_prob(const ModelParams& params, std::span<const int> prompt_ids,
                             std::span<const int> response_ids) {
  validate_sequences(params, prompt_ids, response_ids);
  const Views m = views_of(params);
  std::vector<double> h(static_cast<size_t>(m.H));
  std::vector<double> h_next(static_cast<size_t>(m.H));
  std::vector<double> logits(static_cast<size_t>(m.V));

  const double* prev = nullptr;
  for (int id : prompt_ids) {
    step_hidden(m, prev, id, h_next.data());
    std::swap(h, h_next);
    prev = h.data();
  }

  const size_t L = response_ids.size();
  std::vector<double> out(L);
  for (size_t j = 0; j < L; ++j) {
    logits_from_hidden(m, h.data(), logits.data());
    const double lse = log_sum_exp(logits.data(), m.V);
    out[j] = logits[static_cast<size_t>(response_ids[j])] - lse;
    if (j + 1 < L) {
      step_hidden(m, h.data(), response_ids[j], h_next.data());
      std::swap(h, h_next);
    }
  }
  return out;
}

std::vector<double> log_prob_grad(const ModelParams& params, std::span<const int> prompt_ids,
                                  std::span<const int> response_ids,
                                  std::span<const double> coeffs, ModelParams& grad) {
  validate_sequences(params, prompt_ids, response_ids);
  if (coeffs.size() != response_ids.size())
    throw std::invalid_argument("one coefficient per response position required");
  if (grad.config().vocab_size != params.config().vocab_size ||
      grad.config().embed_dim != params.config().embed_dim ||
      grad.config().hidden_dim != params.config().hidden_dim)
    throw std::invalid_argument("gradient holder shape mismatch");

  const Views m = views_of(params);
  const size_t P = prompt_ids.size();
  const size_t L = response_ids.size();
  const size_t T = P + L - 1;  // inputs consumed

  std::vector<int> inputs;
  inputs.reserve(T);
  inputs.insert(inputs.end(), prompt_ids.begin(), prompt_ids.end());
  inputs.insert(inputs.end(), response_ids.begin(), response_ids.end() - 1);

  // Forward with full state storage.
  std::vector<double> states(T * static_cast<size_t>(m.H));
  for (size_t t = 0; t < T; ++t) {
    const double* prev = t == 0 ? nullptr : &states[(t - 1) * static_cast<size_t>(m.H)];
    step_hidden(m, prev, inputs[t], &states[t * static_cast<size_t>(m.H)]);
  }

  std::vector<double> probs(L * static_cast<size_t>(m.V));
  std::vector<double> logits(static_cast<size_t>(m.V));
  std::vector<double> out(L);
  for (size_t j = 0; j < L; ++j) {
    const double* h = &states[(P - 1 + j) * static_cast<size_t>(m.H)];
    logits_from_hidden(m, h, logits.data());
    const double lse = log_sum_exp(logits.data(), m.V);
    out[j] = logits[static_cast<size_t>(response_ids[j])] - lse;
    double* p = &probs[j * static_cast<size_t>(m.V)];
    for (int v = 0; v < m.V; ++v) p[v] = std::exp(logits[static_cast<size_t>(v)] - lse);
  }

  // Backward. d_h holds dLoss/dh_t while walking t backwards.
  double* g = grad.data();
  double* g_emb = g + grad.emb_off();
  double* g_w_xh = g + grad.w_xh_off();
  double* g_w_hh = g + grad.w_hh_off();
  double* g_b_h = g + grad.b_h_off();
  double* g_w_hy = g + grad.w_hy_off();
  double* g_b_y = g + grad.b_y_off();

  std::vector<double> d_h(static_cast<size_t>(m.H), 0.0);
  std::vector<double> d_h_prev(static_cast<size_t>(m.H), 0.0);
  std::vector<double> d_a(static_cast<size_t>(m.H));

  for (size_t t = T; t-- > 0;) {
    // Prediction hanging off h_t, if any: position t predicts response j where
    // t = P - 1 + j.
    if (t + 1 >= P) {
      const size_t j = t + 1 - P;
      if (j < L && coeffs[j] != 0.0) {
        const double c = coeffs[j];
        const double* p = &probs[j * static_cast<size_t>(m.V)];
        const double* h = &states[t * static_cast<size_t>(m.H)];
        const int y = response_ids[j];
        for (int v = 0; v < m.V; ++v) {
          const double dl = c * (p[v] - (v == y ? 1.0 : 0.0));
          if (dl == 0.0) continue;
          g_b_y[v] += dl;
          double* gw = g_w_hy + static_cast<size_t>(v) * m.H;
          const double* w = m.w_hy + static_cast<size_t>(v) * m.H;
          for (int k = 0; k < m.H; ++k) {
            gw[k] += dl * h[k];
            d_h[static_cast<size_t>(k)] += dl * w[k];
          }
        }
      }
    }

    const double* h = &states[t * static_cast<size_t>(m.H)];
    for (int i = 0; i < m.H; ++i)
      d_a[static_cast<size_t>(i)] = d_h[static_cast<size_t>(i)] * (1.0 - h[i] * h[i]);

    const int u = inputs[t];
    const double* e = m.emb + static_cast<size_t>(u) * m.D;
    double* ge = g_emb + static_cast<size_t>(u) * m.D;
    const double* h_prev = t == 0 ? nullptr : &states[(t - 1) * static_cast<size_t>(m.H)];
    std::fill(d_h_prev.begin(), d_h_prev.end(), 0.0);
    for (int i = 0; i < m.H; ++i) {
      const double da = d_a[static_cast<size_t>(i)];
      if (da == 0.0) continue;
      g_b_h[i] += da;
      double* gwx = g_w_xh + static_cast<size_t>(i) * m.D;
      const double* wx = m.w_xh + static_cast<size_t>(i) * m.D;
      for (int k = 0; k < m.D; ++k) {
        gwx[k] += da * e[k];
        ge[k] += da * wx[k];
      }
      if (h_prev) {
        double* gwh = g_w_hh + static_cast<size_t>(i) * m.H;
        const double* wh = m.w_hh + static_cast<size_t>(i) * m.H;
        for (int k = 0; k < m.H; ++k) {
          gwh[k] += da * h_prev[k];
          d_h_prev[static_cast<size_t>(k)] += da * wh[k];
        }
      }
    }
    std::swap(d_h, d_h_prev);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

namespace {

double example_loss(const ModelParams& params, const EncodedExample& ex, const SftOptions& opts) {
  if (ex.mask.size() != ex.prompt_ids.size() + ex.response_ids.size())
    throw std::invalid_argument("mask length must cover prompt plus response");
  const std::vector<double> lp = log_prob(params, ex.prompt_ids, ex.response_ids);
  double sum = 0.0;
  int active = 0;
  const size_t P = ex.prompt_ids.size();
  for (size_t j = 0; j < lp.size(); ++j) {
    if (!ex.mask[P + j]) continue;
    sum -= lp[j];
    ++active;
  }
  if (active == 0) throw std::invalid_argument("example has no masked-in positions");
  if (opts.average_tokens) sum /= static_cast<double>(active);
  return sum;
}

}  // namespace

double sft_loss(const ModelParams& params, std::span<const EncodedExample> batch,
                const SftOptions& opts) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  double total = 0.0;
  for (const EncodedExample& ex : batch) total += example_loss(params, ex, opts);
  return total / static_cast<double>(batch.size());
}

double sft_loss_grad(const ModelParams& params, std::span<const EncodedExample> batch,
                     ModelParams& grad, const SftOptions& opts) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  std::vector<double> coeffs;
  for (const EncodedExample& ex : batch) {
    if (ex.mask.size() != ex.prompt_ids.size() + ex.response_ids.size())
      throw std::invalid_argument("mask length must cover prompt plus response");
    const size_t P = ex.prompt_ids.size();
    const size_t L = ex.response_ids.size();
    int active = 0;
    for (size_t j = 0; j < L; ++j)
      if (ex.mask[P + j]) ++active;
    if (active == 0) throw std::invalid_argument("example has no masked-in positions");
    const double scale = opts.average_tokens ? inv_b / active : inv_b;
    coeffs.assign(L, 0.0);
    for (size_t j = 0; j < L; ++j)
      if (ex.mask[P + j]) coeffs[j] = scale;
    const std::vector<double> lp =
        log_prob_grad(params, ex.prompt_ids, ex.response_ids, coeffs, grad);
    for (size_t j = 0; j < L; ++j)
      if (ex.mask[P + j]) total -= lp[j] * (opts.average_tokens ? 1.0 / active : 1.0);
  }
  return total * inv_b;
}

// ---------------------------------------------------------------------------
// Optimizer and training

AdamW::AdamW(const AdamWConfig& cfg, size_t n) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

void AdamW::step(ModelParams& params, const ModelParams& grad) {
  if (grad.count() != m_.size() || params.count() != m_.size())
    throw std::invalid_argument("optimizer size mismatch");
  t_ += 1;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  double* p = params.data();
  const double* g = grad.data();
  for (size_t i = 0; i < m_.size(); ++i) {
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    p[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
  }
}

std::vector<TraceEntry> train_sft(ModelParams& params, std::span<const EncodedExample> dataset,
                                  const TrainConfig& cfg) {
  if (dataset.empty()) throw std::invalid_argument("empty training dataset");
  if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be positive");

  AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  opt_cfg.weight_decay = cfg.weight_decay;
  AdamW opt(opt_cfg, params.count());

  Rng rng(cfg.seed);
  std::vector<size_t> order(dataset.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<TraceEntry> trace;
  int64_t step_index = 0;
  ModelParams grad = ModelParams::zeros(params.config());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::vector<EncodedExample> batch;
      batch.reserve(end - start);
      for (size_t i = start; i < end; ++i) batch.push_back(dataset[order[i]]);
      std::fill(grad.values().begin(), grad.values().end(), 0.0);
      const double loss = sft_loss_grad(params, batch, grad, cfg.sft);
      if (!std::isfinite(loss))
        throw std::runtime_error("non-finite loss at step " + std::to_string(step_index));
      opt.step(params, grad);
      trace.push_back(TraceEntry{step_index, loss});
      step_index += 1;
    }
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Decoding

DecoderState prime(const ModelParams& params, std::span<const int> prompt_ids) {
  if (prompt_ids.empty()) throw std::invalid_argument("prompt ids must be non-empty");
  check_ids(prompt_ids, params.config().vocab_size, "prompt");
  const Views m = views_of(params);
  DecoderState st;
  st.h.assign(static_cast<size_t>(m.H), 0.0);
  std::vector<double> next(static_cast<size_t>(m.H));
  const double* prev = nullptr;
  for (int id : prompt_ids) {
    step_hidden(m, prev, id, next.data());
    st.h = next;
    prev = st.h.data();
  }
  return st;
}

DecoderState advance(const ModelParams& params, const DecoderState& state, int token_id) {
  const Views m = views_of(params);
  if (token_id < 0 || token_id >= m.V) throw std::invalid_argument("token id out of range");
  if (state.h.size() != static_cast<size_t>(m.H))
    throw std::invalid_argument("decoder state shape mismatch");
  DecoderState st;
  st.h.assign(static_cast<size_t>(m.H), 0.0);
  step_hidden(m, state.h.data(), token_id, st.h.data());
  return st;
}

std::vector<double> token_log_probs(const ModelParams& params, const DecoderState& state) {
  const Views m = views_of(params);
  if (state.h.size() != static_cast<size_t>(m.H))
    throw std::invalid_argument("decoder state shape mismatch");
  std::vector<double> logits(static_cast<size_t>(m.V));
  logits_from_hidden(m, state.h.data(), logits.data());
  const double lse = log_sum_exp(logits.data(), m.V);
  for (double& x : logits) x -= lse;
  return logits;
}

namespace {

struct Beam {
  std::vector<int> ids;
  double cum = 0.0;
  DecoderState state;
};

struct Expansion {
  size_t parent;
  int token;
  double cum;
};

struct Finished {
  std::vector<int> ids;
  double cum = 0.0;
};

bool expansion_less(const std::vector<Beam>& live, const Expansion& a, const Expansion& b) {
  if (a.cum != b.cum) return a.cum > b.cum;
  const std::vector<int>& pa = live[a.parent].ids;
  const std::vector<int>& pb = live[b.parent].ids;
  const size_t n = std::min(pa.size(), pb.size());
  for (size_t i = 0; i < n; ++i)
    if (pa[i] != pb[i]) return pa[i] < pb[i];
  if (pa.size() != pb.size()) return pa.size() < pb.size();
  return a.token < b.token;
}

}  // namespace

std::vector<BeamCandidate> beam_search(const ModelParams& params, const Vocabulary& vocab,
                                       std::span<const int> prompt_ids, int beam_width,
                                       int max_len) {
  if (beam_width < 1) throw std::invalid_argument("beam width must be positive");
  if (max_len < 1) throw std::invalid_argument("max_len must be positive");
  if (vocab.size() != params.config().vocab_size)
    throw std::invalid_argument("vocabulary size does not match the model");

  const int V = params.config().vocab_size;
  std::vector<Beam> live;
  live.push_back(Beam{{}, 0.0, prime(params, prompt_ids)});
  std::vector<Finished> pool;

  for (int step = 0; step < max_len && !live.empty(); ++step) {
    std::vector<Expansion> exps;
    exps.reserve(live.size() * static_cast<size_t>(V));
    for (size_t b = 0; b < live.size(); ++b) {
      const std::vector<double> dist = token_log_probs(params, live[b].state);
      for (int tok = 0; tok < V; ++tok) {
        // Generation alphabet: real tokens plus the terminator.
        if (tok != Vocabulary::kEos && tok < Vocabulary::kNumReserved) continue;
        exps.push_back(Expansion{b, tok, live[b].cum + dist[static_cast<size_t>(tok)]});
      }
    }
    std::sort(exps.begin(), exps.end(),
              [&](const Expansion& a, const Expansion& b) { return expansion_less(live, a, b); });
    if (static_cast<int>(exps.size()) > beam_width)
      exps.resize(static_cast<size_t>(beam_width));

    std::vector<Beam> next;
    for (const Expansion& e : exps) {
      std::vector<int> ids = live[e.parent].ids;
      ids.push_back(e.token);
      if (e.token == Vocabulary::kEos) {
        pool.push_back(Finished{std::move(ids), e.cum});
      } else if (step + 1 == max_len) {
        pool.push_back(Finished{std::move(ids), e.cum});
      } else {
        next.push_back(Beam{std::move(ids), e.cum, advance(params, live[e.parent].state, e.token)});
      }
    }
    live = std::move(next);
  }

  std::vector<BeamCandidate> scored;
  scored.reserve(pool.size());
  for (Finished& f : pool) {
    BeamCandidate c;
    c.score = f.cum / static_cast<double>(f.ids.size());
    c.text = vocab.decode(f.ids);
    c.ids = std::move(f.ids);
    scored.push_back(std::move(c));
  }
  std::sort(scored.begin(), scored.end(), [](const BeamCandidate& a, const BeamCandidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.text < b.text;
  });

  std::vector<BeamCandidate> out;
  for (BeamCandidate& c : scored) {
    bool dup = false;
    for (const BeamCandidate& kept : out)
      if (kept.text == c.text) {
        dup = true;
        break;
      }
    if (!dup) out.push_back(std::move(c));
    if (static_cast<int>(out.size()) == beam_width) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints and traces

namespace {
constexpr char kCkptMagic[8] = {'L', 'T', 'Q', 'R', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCkptVersion = 1;

template <typename T>
void put(std::string& buf, const T& v) {
  const char* p = reinterpret_cast<const char*>(&v);
  buf.append(p, sizeof(T));
}

template <typename T>
T take(const std::string& buf, size_t& pos, const std::string& path) {
  if (pos + sizeof(T) > buf.size()) throw std::runtime_error("truncated checkpoint: " + path);
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}
}  // namespace

void save_checkpoint(const std::string& path, const ModelParams& params, uint64_t vocab_hash) {
  std::string buf;
  buf.append(kCkptMagic, sizeof(kCkptMagic));
  put(buf, kCkptVersion);
  put(buf, vocab_hash);
  put(buf, static_cast<int32_t>(params.config().vocab_size));
  put(buf, static_cast<int32_t>(params.config().embed_dim));
  put(buf, static_cast<int32_t>(params.config().hidden_dim));
  put(buf, static_cast<uint64_t>(params.count()));
  for (double v : params.values()) put(buf, v);
  write_file_atomic(path, buf);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string buf = read_file(path);
  if (buf.size() < sizeof(kCkptMagic) ||
      std::memcmp(buf.data(), kCkptMagic, sizeof(kCkptMagic)) != 0)
    throw std::runtime_error("bad checkpoint magic: " + path);
  size_t pos = sizeof(kCkptMagic);
  const uint32_t version = take<uint32_t>(buf, pos, path);
  if (version != kCkptVersion)
    throw std::runtime_error("unsupported checkpoint version in " + path);
  Checkpoint ckpt;
  ckpt.vocab_hash = take<uint64_t>(buf, pos, path);
  ckpt.config.vocab_size = take<int32_t>(buf, pos, path);
  ckpt.config.embed_dim = take<int32_t>(buf, pos, path);
  ckpt.config.hidden_dim = take<int32_t>(buf, pos, path);
  const uint64_t count = take<uint64_t>(buf, pos, path);
  if (count != param_count(ckpt.config))
    throw std::runtime_error("checkpoint parameter count mismatch: " + path);
  ckpt.values.resize(count);
  for (uint64_t i = 0; i < count; ++i) ckpt.values[i] = take<double>(buf, pos, path);
  if (pos != buf.size()) throw std::runtime_error("trailing bytes in checkpoint: " + path);
  return ckpt;
}

ModelParams params_from_checkpoint(const Checkpoint& ckpt) {
  ModelParams p = ModelParams::zeros(ckpt.config);
  if (ckpt.values.size() != p.count())
    throw std::runtime_error("checkpoint parameter count mismatch");
  std::copy(ckpt.values.begin(), ckpt.values.end(), p.values().begin());
  return p;
}

void save_trace(const std::string& path, std::span<const TraceEntry> trace) {
  std::ostringstream out;
  for (const TraceEntry& e : trace) {
    json j;
    j["step"] = e.step;
    j["loss"] = e.loss;
    out << j.dump() << "\n";
  }
  write_file_atomic(path, out.str());
}

}  // namespace longtail::model
