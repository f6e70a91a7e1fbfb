#pragma once

// Decoder-only transformer forward pass (pre-norm GPT-2 block order) with a
// per-layer, per-head additive attention bias hook:
//
//   alpha_{i,.} = softmax(q_i K^T / sqrt(d_head) + bias_{i,.})
//
// The hook is consulted for every (layer, head, query position). A provider
// that declines (returns false) leaves the scores untouched, so "no bias" and
// "all-zero bias" give bit-identical results.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "attnmod/error.hpp"
#include "attnmod/model.hpp"
#include "attnmod/tensor.hpp"
#include "attnmod/trace.hpp"
#include "attnmod/types.hpp"

namespace attnmod {

struct BiasQuery {
  std::size_t step = 1;  // index t of the token being generated
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t query_pos = 0;  // bias covers key positions 0..query_pos
};

class BiasProvider {
 public:
  virtual ~BiasProvider() = default;
  // `bias` has query_pos + 1 entries, zero-filled. Return false for "no bias".
  virtual bool fill(const BiasQuery& query, std::span<float> bias) const = 0;
};

// Declines every query.
class NoBias final : public BiasProvider {
 public:
  bool fill(const BiasQuery&, std::span<float>) const override { return false; }
};

// Accepts every query and leaves the zero fill in place.
class ZeroBias final : public BiasProvider {
 public:
  bool fill(const BiasQuery&, std::span<float>) const override { return true; }
};

class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t n_layers, std::size_t n_heads, std::size_t d_head)
      : n_heads_(n_heads), keys_(n_layers * n_heads, Matrix(0, d_head)), values_(n_layers * n_heads, Matrix(0, d_head)) {}

  std::size_t length() const { return keys_.empty() ? 0 : keys_.front().rows(); }
  std::size_t n_layers() const { return n_heads_ == 0 ? 0 : keys_.size() / n_heads_; }

  const Matrix& keys(std::size_t layer, std::size_t head) const { return keys_.at(layer * n_heads_ + head); }
  const Matrix& values(std::size_t layer, std::size_t head) const { return values_.at(layer * n_heads_ + head); }

  void append(std::size_t layer, std::size_t head, std::span<const float> k, std::span<const float> v) {
    keys_.at(layer * n_heads_ + head).push_row(k);
    values_.at(layer * n_heads_ + head).push_row(v);
  }

  friend bool operator==(const KVCache&, const KVCache&) = default;

 private:
  std::size_t n_heads_ = 0;
  std::vector<Matrix> keys_;
  std::vector<Matrix> values_;
};

struct HeadResult {
  std::vector<float> weights;  // attention row over keys
  std::vector<float> output;   // weighted sum of value rows
};

// Single query row against keys/values; `bias` is empty or one entry per key.
inline HeadResult attention_head(std::span<const float> q, MatrixView keys, MatrixView values,
                                 std::span<const float> bias = {}) {
  if (keys.rows != values.rows) throw DimensionError("attention_head: K and V lengths differ");
  if (keys.rows == 0) throw NumericError("empty attention support");
  if (keys.cols != q.size()) throw DimensionError("attention_head: query width != key width");
  if (!bias.empty() && bias.size() != keys.rows) throw DimensionError("attention_head: bias length != key count");
  const float scale = 1.0f / std::sqrt(static_cast<float>(q.size()));
  HeadResult r;
  r.weights.resize(keys.rows);
  for (std::size_t j = 0; j < keys.rows; ++j) r.weights[j] = static_cast<float>(dot(q, keys.row(j))) * scale;
  if (!bias.empty()) {
    for (std::size_t j = 0; j < keys.rows; ++j) r.weights[j] += bias[j];
  }
  softmax_inplace(r.weights);
  std::vector<double> acc(values.cols, 0.0);
  for (std::size_t j = 0; j < values.rows; ++j) {
    const double w = r.weights[j];
    const auto vrow = values.row(j);
    for (std::size_t c = 0; c < values.cols; ++c) acc[c] += w * vrow[c];
  }
  r.output.assign(acc.begin(), acc.end());
  return r;
}

struct PromptResult {
  std::vector<float> logits;  // for the last prompt position
  KVCache cache;
  AttentionTrace trace;
};

struct StepResult {
  std::vector<float> logits;
  AttentionTrace trace;
};

namespace detail {

inline void check_finite(const Matrix& m, std::size_t layer, const char* what) {
  if (!m.all_finite()) throw NonFiniteError(layer, what);
}

// Runs `tokens` at positions cache.length()... and appends them to the cache.
inline StepResult forward_block(const Model& model, std::span<const TokenId> tokens, KVCache& cache,
                                const BiasProvider* bias, const TraceRequest& trace_request, std::size_t step) {
  const auto& cfg = model.config;
  const auto& w = model.weights;
  const std::size_t n = tokens.size();
  const std::size_t first = cache.length();
  const std::size_t d = cfg.d_model, dh = cfg.d_head(), n_heads = cfg.n_heads;
  if (n == 0) throw DimensionError("forward pass needs at least one token");
  if (first + n > cfg.max_context) {
    throw ContextOverflowError("context overflow: " + std::to_string(first + n) + " positions exceed max_context " +
                               std::to_string(cfg.max_context));
  }

  Matrix x(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    const TokenId t = tokens[r];
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw DimensionError("token id " + std::to_string(t) + " outside vocabulary of " +
                           std::to_string(cfg.vocab_size));
    }
    const auto te = w.token_embedding.row(static_cast<std::size_t>(t));
    const auto pe = w.position_embedding.row(first + r);
    auto xr = x.row(r);
    for (std::size_t c = 0; c < d; ++c) xr[c] = te[c] + pe[c];
  }

  StepResult result;
  result.trace = AttentionTrace(cfg.n_layers, n_heads, trace_request, first, first + n, step);
  std::vector<float> bias_row;

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[l];
    const Matrix h = layer_norm(x, lw.ln1_gain, lw.ln1_shift, cfg.layer_norm_eps);
    const Matrix q = affine(h, lw.w_q, lw.b_q);
    const Matrix k = affine(h, lw.w_k, lw.b_k);
    const Matrix v = affine(h, lw.w_v, lw.b_v);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t hd = 0; hd < n_heads; ++hd) {
        cache.append(l, hd, k.row(r).subspan(hd * dh, dh), v.row(r).subspan(hd * dh, dh));
      }
    }

    Matrix attn(n, d);
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
      const MatrixView keys = cache.keys(l, hd).view();
      const MatrixView values = cache.values(l, hd).view();
      for (std::size_t r = 0; r < n; ++r) {
        const std::size_t pos = first + r;
        std::span<const float> bias_span;
        if (bias != nullptr) {
          bias_row.assign(pos + 1, 0.0f);
          if (bias->fill(BiasQuery{step, l, hd, pos}, bias_row)) bias_span = bias_row;
        }
        auto head = attention_head(q.row(r).subspan(hd * dh, dh), keys.top_rows(pos + 1), values.top_rows(pos + 1),
                                   bias_span);
        if (result.trace.has(l, hd)) {
          auto dst = result.trace.mutable_row(l, hd, pos);
          std::copy(head.weights.begin(), head.weights.end(), dst.begin());
        }
        auto dst = attn.row(r).subspan(hd * dh, dh);
        std::copy(head.output.begin(), head.output.end(), dst.begin());
      }
    }
    check_finite(attn, l, "attention output");
    add_inplace(x, affine(attn, lw.w_o, lw.b_o));

    const Matrix h2 = layer_norm(x, lw.ln2_gain, lw.ln2_shift, cfg.layer_norm_eps);
    add_inplace(x, affine(gelu(affine(h2, lw.w_fc, lw.b_fc)), lw.w_proj, lw.b_proj));
    check_finite(x, l, "residual stream");
  }

  Matrix last(1, d);
  std::copy(x.row(n - 1).begin(), x.row(n - 1).end(), last.row(0).begin());
  const Matrix hf = layer_norm(last, w.lnf_gain, w.lnf_shift, cfg.layer_norm_eps);
  result.logits.resize(cfg.vocab_size);
  for (std::size_t t = 0; t < cfg.vocab_size; ++t) {
    result.logits[t] = static_cast<float>(dot(hf.row(0), w.unembedding.row(t)));
  }
  for (float v : result.logits) {
    if (!std::isfinite(v)) throw NonFiniteError(cfg.n_layers, "logits");
  }
  return result;
}

}  // namespace detail

// Processes the whole prompt from an empty cache. `step` is the generation
// step the bias provider sees (the prompt pass produces token 1).
inline PromptResult forward_prompt(const Model& model, std::span<const TokenId> tokens,
                                   const BiasProvider* bias = nullptr,
                                   const TraceRequest& trace = TraceRequest::none(), std::size_t step = 1) {
  if (tokens.empty()) throw DimensionError("prompt must contain at least one token");
  PromptResult out;
  out.cache = KVCache(model.config.n_layers, model.config.n_heads, model.config.d_head());
  auto r = detail::forward_block(model, tokens, out.cache, bias, trace, step);
  out.logits = std::move(r.logits);
  out.trace = std::move(r.trace);
  return out;
}

inline StepResult forward_step(const Model& model, TokenId token, KVCache& cache, const BiasProvider* bias = nullptr,
                               const TraceRequest& trace = TraceRequest::none(), std::size_t step = 1) {
  if (cache.length() >= model.config.max_context) {
    throw ContextOverflowError("context overflow: cache already holds max_context = " +
                               std::to_string(model.config.max_context) + " positions");
  }
  const TokenId one[1] = {token};
  return detail::forward_block(model, one, cache, bias, trace, step);
}

}  // namespace attnmod
