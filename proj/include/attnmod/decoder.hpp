#pragma once

// Deterministic decoding on top of the engine and a Modulator: greedy,
// beam search with per-beam modulation state, and permutation-ordered
// coverage decoding.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "attnmod/engine.hpp"
#include "attnmod/error.hpp"
#include "attnmod/modulation.hpp"
#include "attnmod/tokenizer.hpp"
#include "attnmod/trace.hpp"
#include "attnmod/types.hpp"

namespace attnmod {

enum class DecodeStrategy { greedy, beam };
enum class BeamScoring { length_normalized, raw };

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::greedy;
  std::size_t beam_width = 1;
  std::size_t max_new_tokens = 32;
  std::optional<TokenId> eos;
  std::optional<std::size_t> max_sentences;  // stop once this many sentences are complete
  BeamScoring scoring = BeamScoring::length_normalized;
  std::function<bool(TokenId)> is_terminal;  // sentence terminators; null = none

  void validate() const {
    if (beam_width < 1) throw ConfigError("beam_width must be >= 1");
    if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
    if (max_sentences && *max_sentences < 1) throw ConfigError("max_sentences must be >= 1");
  }
};

struct GenerationRecord {
  TokenSeq prompt;
  TokenSeq generated;
  std::vector<SentenceSpan> generated_sentences;  // absolute positions
  AttentionTrace trace;                           // empty unless tracing was requested
  Strategy strategy = Strategy::none;
  double score = 0.0;  // sum of log-probabilities of every scored token
  std::size_t scored_tokens = 0;
  bool truncated = false;
  bool hit_eos = false;
  std::vector<bool> covered;  // final coverage flags under coverage modulation
  std::vector<float> order_weights;

  double normalized_score() const { return scored_tokens == 0 ? score : score / static_cast<double>(scored_tokens); }
};

struct BiasLogEntry {
  std::size_t step = 0;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t query_pos = 0;
  std::vector<float> bias;
};

using BiasLog = std::vector<BiasLogEntry>;

// Records every bias vector the inner provider supplies.
class LoggingBias final : public BiasProvider {
 public:
  LoggingBias(const BiasProvider& inner, BiasLog* log) : inner_(inner), log_(log) {}
  bool fill(const BiasQuery& q, std::span<float> bias) const override {
    const bool used = inner_.fill(q, bias);
    if (used && log_ != nullptr) log_->push_back({q.step, q.layer, q.head, q.query_pos, {bias.begin(), bias.end()}});
    return used;
  }

 private:
  const BiasProvider& inner_;
  BiasLog* log_;
};

inline std::vector<double> log_softmax(std::span<const float> logits) {
  const float max_v = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - max_v);
  const double lse = max_v + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) out[k] = logits[k] - lse;
  return out;
}

// Lowest id wins ties.
inline TokenId argmax(std::span<const float> logits) {
  return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

// One in-flight hypothesis: KV cache, modulation state, tokens, score.
// Copying a session forks the hypothesis.
class Session {
 public:
  Session(const Model& model, TokenSeq prompt, Modulator modulator, TraceRequest trace = TraceRequest::none(),
          BiasLog* bias_log = nullptr)
      : model_(&model),
        modulator_(std::move(modulator)),
        user_trace_(std::move(trace)),
        bias_log_(bias_log) {
    record_.prompt = std::move(prompt);
    record_.strategy = modulator_.strategy();
    if (const auto* c = modulator_.coverage_state()) record_.order_weights = c->order_weights;
    engine_trace_ = user_trace_.merged(modulator_.required_trace(model.config.n_layers), model.config.n_layers,
                                       model.config.n_heads);
  }

  // Prompt pass (preceded by an unbiased probe pass when the strategy needs
  // attention history). Leaves logits for generated token 1.
  void start() {
    if (record_.prompt.empty()) throw DimensionError("prompt must contain at least one token");
    if (record_.prompt.size() > model_->config.max_context) {
      throw ContextOverflowError("prompt of " + std::to_string(record_.prompt.size()) + " tokens exceeds max_context " +
                                 std::to_string(model_->config.max_context));
    }
    modulator_.config().validate(model_->config.n_layers);
    if (modulator_.needs_prompt_probe()) {
      auto probe = forward_prompt(*model_, record_.prompt, nullptr, modulator_.required_trace(model_->config.n_layers));
      modulator_.observe(probe.trace);
    }
    const ModulationBias mb(modulator_, step_);
    const LoggingBias lb(mb, bias_log_);
    auto r = forward_prompt(*model_, record_.prompt, &lb, engine_trace_, step_);
    cache_ = std::move(r.cache);
    logits_ = std::move(r.logits);
    modulator_.observe(r.trace);
    if (user_trace_.enabled) record_.trace = std::move(r.trace);
    processed_ = record_.prompt.size();
  }

  const std::vector<float>& logits() const { return logits_; }
  std::size_t step() const { return step_; }
  const Modulator& modulator() const { return modulator_; }
  const GenerationRecord& record() const { return record_; }
  GenerationRecord& record() { return record_; }
  std::size_t completed_sentences() const { return sentences_; }

  void add_score(double logprob) {
    record_.score += logprob;
    ++record_.scored_tokens;
  }

  // Appends a generated token without running the model.
  void push_token(TokenId token, const std::function<bool(TokenId)>& is_terminal = {}) {
    record_.generated.push_back(token);
    modulator_.on_token(token);
    if (is_terminal && is_terminal(token)) ++sentences_;
  }

  bool can_extend() const { return cache_.length() < model_->config.max_context; }

  // Runs the last pushed token, producing logits for the next step.
  void compute_next() {
    if (processed_ >= record_.prompt.size() + record_.generated.size()) {
      throw DimensionError("compute_next called with no unprocessed token");
    }
    ++step_;
    const ModulationBias mb(modulator_, step_);
    const LoggingBias lb(mb, bias_log_);
    auto r = forward_step(*model_, record_.generated.back(), cache_, &lb, engine_trace_, step_);
    logits_ = std::move(r.logits);
    modulator_.observe(r.trace);
    if (user_trace_.enabled) record_.trace.extend(r.trace);
    ++processed_;
  }

  // Runs the final generated token too, so the trace covers every position.
  void complete_trace() {
    if (!user_trace_.enabled || record_.generated.empty()) return;
    if (processed_ < record_.prompt.size() + record_.generated.size() && can_extend()) compute_next();
  }

  GenerationRecord finish(const std::function<bool(TokenId)>& is_terminal) && {
    if (const auto* c = modulator_.coverage_state()) record_.covered = c->covered;
    auto spans = is_terminal ? Tokenizer::segment_sentences(record_.generated, is_terminal, SpanRole::generated)
                             : Tokenizer::segment_sentences(record_.generated, [](TokenId) { return false; },
                                                            SpanRole::generated);
    record_.generated_sentences = offset_spans(std::move(spans), record_.prompt.size(), SpanRole::generated);
    return std::move(record_);
  }

 private:
  const Model* model_;
  Modulator modulator_;
  TraceRequest user_trace_;
  TraceRequest engine_trace_;
  BiasLog* bias_log_;
  KVCache cache_;
  std::vector<float> logits_;
  GenerationRecord record_;
  std::size_t step_ = 1;
  std::size_t processed_ = 0;
  std::size_t sentences_ = 0;
};

// What happened after appending a chosen token.
enum class StepOutcome { continued, finished };

namespace detail {

// Shared by greedy and beam search so that width-1 beam search is greedy.
inline StepOutcome apply_choice(Session& s, TokenId token, double logprob, std::size_t t, const DecodeConfig& cfg) {
  s.add_score(logprob);
  if (cfg.eos && token == *cfg.eos) {
    s.record().hit_eos = true;
    return StepOutcome::finished;
  }
  s.push_token(token, cfg.is_terminal);
  if (cfg.max_sentences && s.completed_sentences() >= *cfg.max_sentences) return StepOutcome::finished;
  if (t >= cfg.max_new_tokens) return StepOutcome::finished;
  if (!s.can_extend()) {
    s.record().truncated = true;
    return StepOutcome::finished;
  }
  s.compute_next();
  return StepOutcome::continued;
}

// Higher score first; then shorter; then lexicographically smaller tokens.
inline bool better_final(const GenerationRecord& a, const GenerationRecord& b, BeamScoring scoring) {
  const double sa = scoring == BeamScoring::length_normalized ? a.normalized_score() : a.score;
  const double sb = scoring == BeamScoring::length_normalized ? b.normalized_score() : b.score;
  if (sa != sb) return sa > sb;
  if (a.generated.size() != b.generated.size()) return a.generated.size() < b.generated.size();
  return a.generated < b.generated;
}

}  // namespace detail

inline GenerationRecord greedy(const Model& model, const TokenSeq& prompt, const Modulator& modulator,
                               const DecodeConfig& cfg, const TraceRequest& trace = TraceRequest::none(),
                               BiasLog* bias_log = nullptr) {
  cfg.validate();
  Session s(model, prompt, modulator, trace, bias_log);
  s.start();
  for (std::size_t t = 1; t <= cfg.max_new_tokens; ++t) {
    const TokenId tok = argmax(s.logits());
    const double lp = log_softmax(s.logits())[static_cast<std::size_t>(tok)];
    if (detail::apply_choice(s, tok, lp, t, cfg) == StepOutcome::finished) break;
  }
  s.complete_trace();
  return std::move(s).finish(cfg.is_terminal);
}

struct BeamResult {
  GenerationRecord best;
  std::vector<GenerationRecord> final_beam;  // every finished hypothesis, best first
};

inline BeamResult beam_search(const Model& model, const TokenSeq& prompt, const Modulator& modulator,
                              const DecodeConfig& cfg, const TraceRequest& trace = TraceRequest::none(),
                              BiasLog* bias_log = nullptr) {
  cfg.validate();
  const std::size_t width = cfg.beam_width;
  Session root(model, prompt, modulator, trace, bias_log);
  root.start();
  std::vector<Session> live;
  live.push_back(std::move(root));
  std::vector<Session> finished;

  struct Candidate {
    std::size_t beam;
    TokenId token;
    double logprob;
    double score;
  };

  for (std::size_t t = 1; t <= cfg.max_new_tokens && !live.empty(); ++t) {
    std::vector<Candidate> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      const auto lsm = log_softmax(live[b].logits());
      std::vector<TokenId> ids(lsm.size());
      for (std::size_t k = 0; k < ids.size(); ++k) ids[k] = static_cast<TokenId>(k);
      const std::size_t k_top = std::min(width, ids.size());
      std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k_top), ids.end(),
                        [&](TokenId a, TokenId c) { return lsm[a] != lsm[c] ? lsm[a] > lsm[c] : a < c; });
      for (std::size_t k = 0; k < k_top; ++k) {
        cands.push_back({b, ids[k], lsm[ids[k]], live[b].record().score + lsm[ids[k]]});
      }
    }
    // Rank by cumulative score, then by the extended token sequence, so the
    // outcome does not depend on the order beams were expanded in.
    std::sort(cands.begin(), cands.end(), [&](const Candidate& a, const Candidate& c) {
      if (a.score != c.score) return a.score > c.score;
      const auto& ga = live[a.beam].record().generated;
      const auto& gc = live[c.beam].record().generated;
      if (ga != gc) return ga < gc;
      return a.token < c.token;
    });
    if (cands.size() > width) cands.resize(width);

    std::vector<Session> next;
    for (const auto& c : cands) {
      Session s = live[c.beam];
      if (detail::apply_choice(s, c.token, c.logprob, t, cfg) == StepOutcome::finished) {
        finished.push_back(std::move(s));
      } else {
        next.push_back(std::move(s));
      }
    }
    live = std::move(next);
  }
  for (auto& s : live) finished.push_back(std::move(s));

  std::vector<GenerationRecord> records;
  for (auto& s : finished) {
    s.complete_trace();
    records.push_back(std::move(s).finish(cfg.is_terminal));
  }
  std::sort(records.begin(), records.end(),
            [&](const GenerationRecord& a, const GenerationRecord& b) { return detail::better_final(a, b, cfg.scoring); });
  BeamResult out;
  out.best = records.front();
  out.final_beam = std::move(records);
  return out;
}

inline GenerationRecord decode(const Model& model, const TokenSeq& prompt, const Modulator& modulator,
                               const DecodeConfig& cfg, const TraceRequest& trace = TraceRequest::none(),
                               BiasLog* bias_log = nullptr) {
  if (cfg.strategy == DecodeStrategy::beam) return beam_search(model, prompt, modulator, cfg, trace, bias_log).best;
  return greedy(model, prompt, modulator, cfg, trace, bias_log);
}

inline constexpr std::size_t kDefaultPermutationCap = 5;

struct PermutationOutcome {
  std::vector<float> order_weights;
  GenerationRecord record;
  std::size_t covered = 0;
};

// Most concepts covered; ties go to the shorter generation, then to the
// lexicographically smaller token sequence.
inline std::size_t select_permutation(const std::vector<PermutationOutcome>& outcomes) {
  if (outcomes.empty()) throw DimensionError("no permutation outcomes to select from");
  std::size_t best = 0;
  for (std::size_t k = 1; k < outcomes.size(); ++k) {
    const auto& a = outcomes[k];
    const auto& b = outcomes[best];
    if (a.covered != b.covered) {
      if (a.covered > b.covered) best = k;
      continue;
    }
    if (a.record.generated.size() != b.record.generated.size()) {
      if (a.record.generated.size() < b.record.generated.size()) best = k;
      continue;
    }
    if (a.record.generated < b.record.generated) best = k;
  }
  return best;
}

struct PermutationResult {
  PermutationOutcome selected;
  std::vector<PermutationOutcome> all;  // in permutation order
};

// Runs `run(order_weights)` once per permutation of 1..m, where `run` returns
// a (GenerationRecord, covered-count) pair, and keeps the best outcome.
template <class Run>
PermutationResult permutation_generate(std::size_t m, Run&& run, std::size_t cap = kDefaultPermutationCap) {
  if (m == 0) throw ConfigError("permutation generation needs at least one concept");
  if (m > cap) {
    throw ConfigError(std::to_string(m) + " concepts exceed the permutation cap of " + std::to_string(cap) +
                      "; raise the cap explicitly to run " + std::to_string(m) + "! decodings");
  }
  std::vector<int> perm(m);
  for (std::size_t k = 0; k < m; ++k) perm[k] = static_cast<int>(k + 1);
  PermutationResult res;
  do {
    std::vector<float> weights(perm.begin(), perm.end());
    auto [record, covered] = run(weights);
    res.all.push_back({weights, std::move(record), covered});
  } while (std::next_permutation(perm.begin(), perm.end()));
  res.selected = res.all[select_permutation(res.all)];
  return res;
}

}  // namespace attnmod
