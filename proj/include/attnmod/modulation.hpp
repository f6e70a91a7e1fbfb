#pragma once

// Attention reweighting strategies applied through the engine's bias hook.
//
//   balanced_context: bias_j = clamp(scale / abar_{g,p(j)}, 0, clip) for key
//     positions j inside prompt sentence p, where abar_{g,p} is the mean
//     sentence-to-sentence attention from the current generation sentence g
//     to p, averaged over all heads of the modulated layers.
//   coverage: bias_j = scale * w_k while concept k is uncovered and
//     scale / m once it appears in the generation (w_k = 1 unless order
//     weights are given); zero outside concept tokens.
//
// Only layers in [layer_start, layer_end) are biased, on every head.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "attnmod/engine.hpp"
#include "attnmod/error.hpp"
#include "attnmod/lexicon.hpp"
#include "attnmod/trace.hpp"
#include "attnmod/types.hpp"

namespace attnmod {

enum class Strategy { none, balanced_context, coverage };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::none:
      return "none";
    case Strategy::balanced_context:
      return "balanced_context";
    case Strategy::coverage:
      return "coverage";
  }
  return "none";
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "none") return Strategy::none;
  if (s == "balanced_context" || s == "balanced") return Strategy::balanced_context;
  if (s == "coverage") return Strategy::coverage;
  throw ConfigError("unknown modulation strategy: " + std::string(s));
}

enum class TaskMode { narrative, abductive, constrained };

inline std::string_view to_string(TaskMode m) {
  switch (m) {
    case TaskMode::narrative:
      return "narrative";
    case TaskMode::abductive:
      return "abductive";
    case TaskMode::constrained:
      return "constrained";
  }
  return "narrative";
}

inline TaskMode parse_task_mode(std::string_view s) {
  if (s == "narrative") return TaskMode::narrative;
  if (s == "abductive") return TaskMode::abductive;
  if (s == "constrained") return TaskMode::constrained;
  throw ConfigError("unknown task mode: " + std::string(s));
}

struct LayerRange {
  std::size_t start = 0;
  std::size_t end = 0;
};

// Layer ranges tuned for a 36-layer GPT2-L.
inline LayerRange task_default_layers(TaskMode mode) {
  switch (mode) {
    case TaskMode::narrative:
      return {8, 32};
    case TaskMode::abductive:
      return {12, 32};
    case TaskMode::constrained:
      return {24, 32};
  }
  return {0, 0};
}

inline Strategy task_default_strategy(TaskMode mode) {
  return mode == TaskMode::constrained ? Strategy::coverage : Strategy::balanced_context;
}

// Bias substituted for an infinite clip when a sentence's attention
// underflows to exactly zero; same magnitude as the causal-mask surrogate.
inline constexpr float kUnderflowBias = 1e9f;

struct ModulationConfig {
  Strategy strategy = Strategy::none;
  std::size_t layer_start = 0;
  std::size_t layer_end = 0;
  float scale = 1.0f;
  float clip = std::numeric_limits<float>::infinity();

  void validate(std::size_t n_layers) const {
    if (strategy == Strategy::none) return;
    if (!(layer_start < layer_end && layer_end <= n_layers)) {
      throw ConfigError("modulated layer range [" + std::to_string(layer_start) + ", " + std::to_string(layer_end) +
                        ") invalid for a " + std::to_string(n_layers) + "-layer model");
    }
    if (!(scale >= 0.0f) || !std::isfinite(scale)) throw ConfigError("modulation scale must be finite and >= 0");
    if (!(clip > 0.0f)) throw ConfigError("modulation clip must be positive");
  }

  bool modulates(std::size_t layer) const {
    return strategy != Strategy::none && layer >= layer_start && layer < layer_end;
  }
};

struct BalancedContextState {
  std::vector<SentenceSpan> prompt_sentences;
  std::vector<double> sentence_attention;  // abar_{g,p} per prompt sentence
  std::optional<SentenceSpan> query_sentence;  // g behind the current values
  std::size_t prompt_length = 0;
  // Per absolute position: attention row averaged over the modulated
  // (layer, head) slots; empty until that position has been observed.
  std::vector<std::vector<double>> rows;
  std::vector<bool> generated_terminal;
  std::vector<int> sentence_of;  // prompt position -> sentence index or -1
  std::size_t underflow_count = 0;
  std::function<bool(TokenId)> is_terminal;
};

struct CoverageState {
  std::vector<SentenceSpan> concepts;  // token spans in the prompt
  std::vector<std::string> concept_texts;
  std::vector<bool> covered;
  std::vector<float> order_weights;  // empty: all 1
  TokenSeq generated;
  std::shared_ptr<const InflectionLexicon> lexicon;
  std::function<std::string(std::span<const TokenId>)> decode;

  std::size_t m() const { return concepts.size(); }
};

// Mean over i in g, j in p of rows[i][j].
inline double block_mean(const std::vector<std::vector<double>>& rows, const SentenceSpan& g, const SentenceSpan& p) {
  double sum = 0.0;
  for (std::size_t i = g.start; i <= g.end; ++i) {
    if (i >= rows.size() || rows[i].empty()) {
      throw TraceError("no observed attention row for query position " + std::to_string(i));
    }
    for (std::size_t j = p.start; j <= p.end; ++j) sum += j < rows[i].size() ? rows[i][j] : 0.0;
  }
  return sum / static_cast<double>(g.size() * p.size());
}

// The query sentence g: the in-progress generated sentence among observed
// positions, else the last completed one, else the last prompt sentence.
inline SentenceSpan current_query_sentence(const BalancedContextState& s) {
  std::size_t observed = 0;
  while (s.prompt_length + observed < s.rows.size() && !s.rows[s.prompt_length + observed].empty() &&
         observed < s.generated_terminal.size()) {
    ++observed;
  }
  if (observed == 0) {
    if (s.prompt_sentences.empty()) throw TraceError("balanced modulation needs at least one prompt sentence");
    return s.prompt_sentences.back();
  }
  std::size_t start = 0;
  for (std::size_t k = 0; k + 1 < observed; ++k) {
    if (s.generated_terminal[k]) start = k + 1;
  }
  return {s.prompt_length + start, s.prompt_length + observed - 1, SpanRole::generated, 0};
}

inline void refresh_sentence_attention(BalancedContextState& s) {
  const SentenceSpan g = current_query_sentence(s);
  s.query_sentence = g;
  s.sentence_attention.assign(s.prompt_sentences.size(), 0.0);
  for (std::size_t p = 0; p < s.prompt_sentences.size(); ++p) {
    s.sentence_attention[p] = block_mean(s.rows, g, s.prompt_sentences[p]);
    if (s.sentence_attention[p] <= 0.0) ++s.underflow_count;
  }
}

inline std::vector<float> bias_balanced(const BiasQuery& q, const BalancedContextState& s, const ModulationConfig& cfg) {
  std::vector<float> bias(q.query_pos + 1, 0.0f);
  if (!cfg.modulates(q.layer) || cfg.scale == 0.0f) return bias;
  const float cap = std::isinf(cfg.clip) ? kUnderflowBias : cfg.clip;
  for (std::size_t j = 0; j <= q.query_pos && j < s.sentence_of.size(); ++j) {
    const int p = s.sentence_of[j];
    if (p < 0) continue;
    const double a = s.sentence_attention.at(static_cast<std::size_t>(p));
    if (a <= 0.0) {
      bias[j] = cap;
      continue;
    }
    const double b = static_cast<double>(cfg.scale) / a;
    bias[j] = static_cast<float>(std::min<double>(b, cfg.clip));
  }
  return bias;
}

inline std::vector<float> bias_coverage(const BiasQuery& q, const CoverageState& s, const ModulationConfig& cfg) {
  std::vector<float> bias(q.query_pos + 1, 0.0f);
  if (!cfg.modulates(q.layer)) return bias;
  const float m = static_cast<float>(s.m());
  for (std::size_t k = 0; k < s.concepts.size(); ++k) {
    const float w = s.covered[k] ? 1.0f / m : (s.order_weights.empty() ? 1.0f : s.order_weights[k]);
    const float b = cfg.scale * w;
    for (std::size_t j = s.concepts[k].start; j <= s.concepts[k].end && j <= q.query_pos; ++j) bias[j] = b;
  }
  return bias;
}

// Per-generation modulation state. Copyable: each beam owns its own copy.
class Modulator {
 public:
  Modulator() = default;

  static Modulator balanced(const ModulationConfig& cfg, std::size_t prompt_length,
                            std::vector<SentenceSpan> prompt_sentences, std::function<bool(TokenId)> is_terminal) {
    if (cfg.strategy != Strategy::balanced_context) throw ConfigError("balanced modulator needs balanced_context");
    BalancedContextState s;
    s.prompt_length = prompt_length;
    s.prompt_sentences = std::move(prompt_sentences);
    s.sentence_of.assign(prompt_length, -1);
    for (std::size_t p = 0; p < s.prompt_sentences.size(); ++p) {
      const auto& sp = s.prompt_sentences[p];
      if (sp.end >= prompt_length) throw ConfigError("prompt sentence extends past the prompt");
      for (std::size_t j = sp.start; j <= sp.end; ++j) s.sentence_of[j] = static_cast<int>(p);
    }
    s.is_terminal = std::move(is_terminal);
    Modulator m;
    m.config_ = cfg;
    m.state_ = std::move(s);
    return m;
  }

  static Modulator coverage(const ModulationConfig& cfg, std::vector<SentenceSpan> concepts,
                            std::vector<std::string> concept_texts, std::vector<float> order_weights,
                            std::shared_ptr<const InflectionLexicon> lexicon,
                            std::function<std::string(std::span<const TokenId>)> decode) {
    if (cfg.strategy != Strategy::coverage) throw ConfigError("coverage modulator needs strategy coverage");
    if (concepts.empty()) throw ConfigError("coverage modulation needs at least one concept");
    if (concepts.size() != concept_texts.size()) throw ConfigError("concept spans and texts differ in count");
    if (!order_weights.empty() && order_weights.size() != concepts.size()) {
      throw ConfigError("order weights must have one entry per concept");
    }
    for (float w : order_weights) {
      if (!(w > 0.0f) || !std::isfinite(w)) throw ConfigError("order weights must be positive and finite");
    }
    CoverageState s;
    s.concepts = std::move(concepts);
    s.concept_texts = std::move(concept_texts);
    s.covered.assign(s.concepts.size(), false);
    s.order_weights = std::move(order_weights);
    s.lexicon = lexicon ? std::move(lexicon) : std::make_shared<const InflectionLexicon>();
    s.decode = std::move(decode);
    Modulator m;
    m.config_ = cfg;
    m.state_ = std::move(s);
    return m;
  }

  const ModulationConfig& config() const noexcept { return config_; }
  Strategy strategy() const noexcept { return config_.strategy; }

  // Balanced-context needs attention from a plain prompt pass before the
  // first modulated step.
  bool needs_prompt_probe() const { return std::holds_alternative<BalancedContextState>(state_); }

  // Slots the engine must trace for observe() to work.
  TraceRequest required_trace(std::size_t n_layers) const {
    if (!std::holds_alternative<BalancedContextState>(state_)) return TraceRequest::none();
    return TraceRequest::layer_range(n_layers, config_.layer_start, config_.layer_end);
  }

  // Absorbs attention rows from a forward pass.
  void observe(const AttentionTrace& trace) {
    auto* s = std::get_if<BalancedContextState>(&state_);
    if (s == nullptr || trace.empty()) return;
    if (s->rows.size() < trace.end_position()) s->rows.resize(trace.end_position());
    const double n_slots = static_cast<double>((config_.layer_end - config_.layer_start) * trace.n_heads());
    for (std::size_t i = trace.first_position(); i < trace.end_position(); ++i) {
      std::vector<double> avg(i + 1, 0.0);
      for (std::size_t l = config_.layer_start; l < config_.layer_end; ++l) {
        for (std::size_t h = 0; h < trace.n_heads(); ++h) {
          const auto r = trace.row(l, h, i);
          for (std::size_t j = 0; j <= i; ++j) avg[j] += r[j];
        }
      }
      for (double& v : avg) v /= n_slots;
      s->rows[i] = std::move(avg);
    }
    refresh_sentence_attention(*s);
  }

  // Records a newly generated token.
  void on_token(TokenId token) {
    if (auto* s = std::get_if<BalancedContextState>(&state_)) {
      s->generated_terminal.push_back(s->is_terminal ? s->is_terminal(token) : false);
    } else if (auto* c = std::get_if<CoverageState>(&state_)) {
      c->generated.push_back(token);
      if (!c->decode) return;
      const auto words = split_words(c->decode(c->generated));
      for (std::size_t k = 0; k < c->concepts.size(); ++k) {
        if (!c->covered[k] && c->lexicon->covers(c->concept_texts[k], words)) c->covered[k] = true;
      }
    }
  }

  // Engine hook body.
  bool bias(const BiasQuery& q, std::span<float> out) const {
    if (!config_.modulates(q.layer)) return false;
    std::vector<float> b;
    if (const auto* s = std::get_if<BalancedContextState>(&state_)) {
      if (s->query_sentence == std::nullopt) return false;
      b = bias_balanced(q, *s, config_);
    } else if (const auto* c = std::get_if<CoverageState>(&state_)) {
      b = bias_coverage(q, *c, config_);
    } else {
      return false;
    }
    std::copy(b.begin(), b.end(), out.begin());
    return true;
  }

  const BalancedContextState* balanced_state() const { return std::get_if<BalancedContextState>(&state_); }
  const CoverageState* coverage_state() const { return std::get_if<CoverageState>(&state_); }
  BalancedContextState* balanced_state() { return std::get_if<BalancedContextState>(&state_); }
  CoverageState* coverage_state() { return std::get_if<CoverageState>(&state_); }

 private:
  ModulationConfig config_;
  std::variant<std::monostate, BalancedContextState, CoverageState> state_;
};

// Advances the state by one decoding step: absorb the step's attention, then
// record the token it produced.
inline void update_state(Modulator& m, std::optional<TokenId> new_token, const AttentionTrace* trace) {
  if (trace != nullptr) m.observe(*trace);
  if (new_token) m.on_token(*new_token);
}

// Adapts a Modulator to the engine hook for a given step.
class ModulationBias final : public BiasProvider {
 public:
  ModulationBias(const Modulator& modulator, std::size_t step) : modulator_(modulator), step_(step) {}
  bool fill(const BiasQuery& q, std::span<float> bias) const override {
    BiasQuery adjusted = q;
    adjusted.step = step_;
    return modulator_.bias(adjusted, bias);
  }

 private:
  const Modulator& modulator_;
  std::size_t step_;
};

}  // namespace attnmod
