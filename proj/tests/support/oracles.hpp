#pragma once

// Slow, independent reference implementations used as test oracles. Nothing
// here shares code paths with the library beyond the data types.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "attnmod/attnmod.hpp"

namespace oracle {

using attnmod::Matrix;
using attnmod::Model;
using attnmod::SentenceSpan;
using attnmod::TokenId;

using Dense = std::vector<std::vector<std::vector<std::vector<double>>>>;  // [l][h][i][j]

inline std::vector<std::vector<double>> matmul(const std::vector<std::vector<double>>& a,
                                               const std::vector<std::vector<double>>& b) {
  const std::size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
  std::vector<std::vector<double>> c(n, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t t = 0; t < k; ++t) c[i][j] += a[i][t] * b[t][j];
  return c;
}

inline std::vector<std::vector<double>> to_dense(const Matrix& m) {
  std::vector<std::vector<double>> out(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  return out;
}

// Bias callback: (layer, head, query_pos, key_pos) -> additive bias.
using BiasFn = std::function<double(std::size_t, std::size_t, std::size_t, std::size_t)>;

struct ForwardResult {
  std::vector<std::vector<double>> logits;  // every position
  Dense attention;
};

namespace detail {

inline std::vector<double> layer_norm(const std::vector<double>& x, const std::vector<float>& g,
                                      const std::vector<float>& b, double eps) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) out[k] = (x[k] - mean) / std::sqrt(var + eps) * g[k] + b[k];
  return out;
}

inline std::vector<double> affine(const std::vector<double>& x, const Matrix& w, const std::vector<float>& b) {
  std::vector<double> out(w.cols(), 0.0);
  for (std::size_t o = 0; o < w.cols(); ++o) {
    double s = b.empty() ? 0.0 : b[o];
    for (std::size_t i = 0; i < w.rows(); ++i) s += x[i] * w(i, o);
    out[o] = s;
  }
  return out;
}

inline double gelu(double x) {
  const double c = std::sqrt(2.0 / 3.14159265358979323846);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

}  // namespace detail

// Full recomputation with an explicit causal mask, double precision, no cache.
inline ForwardResult forward(const Model& model, const std::vector<TokenId>& tokens, const BiasFn& bias = {}) {
  const auto& cfg = model.config;
  const auto& w = model.weights;
  const std::size_t n = tokens.size(), d = cfg.d_model, H = cfg.n_heads, dh = d / H;
  std::vector<std::vector<double>> x(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c)
      x[i][c] = static_cast<double>(w.token_embedding(static_cast<std::size_t>(tokens[i]), c)) +
                w.position_embedding(i, c);

  ForwardResult res;
  res.attention.assign(cfg.n_layers, std::vector<std::vector<std::vector<double>>>(
                                         H, std::vector<std::vector<double>>(n, std::vector<double>(n, 0.0))));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[l];
    std::vector<std::vector<double>> q(n), k(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto h = detail::layer_norm(x[i], lw.ln1_gain, lw.ln1_shift, cfg.layer_norm_eps);
      q[i] = detail::affine(h, lw.w_q, lw.b_q);
      k[i] = detail::affine(h, lw.w_k, lw.b_k);
      v[i] = detail::affine(h, lw.w_v, lw.b_v);
    }
    std::vector<std::vector<double>> attn(n, std::vector<double>(d, 0.0));
    for (std::size_t hd = 0; hd < H; ++hd) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n);
        for (std::size_t j = 0; j < n; ++j) {
          double dotp = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dotp += q[i][hd * dh + c] * k[j][hd * dh + c];
          s[j] = dotp / std::sqrt(static_cast<double>(dh));
          if (bias && j <= i) s[j] += bias(l, hd, i, j);
          if (j > i) s[j] = -std::numeric_limits<double>::infinity();
        }
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0.0;
        for (double& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j < n; ++j) {
          const double a = s[j] / z;
          res.attention[l][hd][i][j] = a;
          for (std::size_t c = 0; c < dh; ++c) attn[i][hd * dh + c] += a * v[j][hd * dh + c];
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto o = detail::affine(attn[i], lw.w_o, lw.b_o);
      for (std::size_t c = 0; c < d; ++c) x[i][c] += o[c];
      const auto h2 = detail::layer_norm(x[i], lw.ln2_gain, lw.ln2_shift, cfg.layer_norm_eps);
      auto f = detail::affine(h2, lw.w_fc, lw.b_fc);
      for (double& e : f) e = detail::gelu(e);
      const auto p = detail::affine(f, lw.w_proj, lw.b_proj);
      for (std::size_t c = 0; c < d; ++c) x[i][c] += p[c];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto hf = detail::layer_norm(x[i], w.lnf_gain, w.lnf_shift, cfg.layer_norm_eps);
    std::vector<double> lg(cfg.vocab_size, 0.0);
    for (std::size_t t = 0; t < cfg.vocab_size; ++t)
      for (std::size_t c = 0; c < d; ++c) lg[t] += hf[c] * w.unembedding(t, c);
    res.logits.push_back(std::move(lg));
  }
  return res;
}

// ---- sentence statistics over a dense [l][h][i][j] field ----

inline double mean_block(const Dense& a, std::size_t l, std::size_t h, const SentenceSpan& g, const SentenceSpan& p) {
  double s = 0.0;
  for (std::size_t i = g.start; i <= g.end; ++i)
    for (std::size_t j = p.start; j <= p.end; ++j) s += a[l][h][i][j];
  return s / static_cast<double>((g.end - g.start + 1) * (p.end - p.start + 1));
}

inline double max_block(const Dense& a, std::size_t l, std::size_t h, const SentenceSpan& g, const SentenceSpan& p) {
  double m = -1.0;
  for (std::size_t i = g.start; i <= g.end; ++i)
    for (std::size_t j = p.start; j <= p.end; ++j) m = std::max(m, a[l][h][i][j]);
  return m;
}

inline double aggregate_mean(const Dense& a, const SentenceSpan& g, const SentenceSpan& p) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t l = 0; l < a.size(); ++l)
    for (std::size_t h = 0; h < a[l].size(); ++h, ++n) s += mean_block(a, l, h, g, p);
  return s / static_cast<double>(n);
}

inline double aggregate_max(const Dense& a, const SentenceSpan& g, const SentenceSpan& p) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t l = 0; l < a.size(); ++l)
    for (std::size_t h = 0; h < a[l].size(); ++h, ++n) s += max_block(a, l, h, g, p);
  return s / static_cast<double>(n);
}

struct ChangeItem {
  const Dense* field;
  SentenceSpan g_i, g_next, p;
};

inline double change(const std::vector<ChangeItem>& items) {
  double s = 0.0;
  for (const auto& it : items) s += std::abs(aggregate_mean(*it.field, it.g_next, it.p) - aggregate_mean(*it.field, it.g_i, it.p));
  return s / static_cast<double>(items.size());
}

struct EntropyOracleItem {
  const Dense* field;
  SentenceSpan g, p;
};

inline double entropy(const std::vector<EntropyOracleItem>& items, std::size_t layer) {
  double total = 0.0;
  for (const auto& it : items) {
    const auto& a = *it.field;
    double s = 0.0;
    for (std::size_t h = 0; h < a[layer].size(); ++h)
      for (std::size_t i = it.g.start; i <= it.g.end; ++i)
        for (std::size_t j = it.p.start; j <= it.p.end; ++j) {
          const double v = a[layer][h][i][j];
          if (v != 0.0) s += -v * std::log(v);
        }
    total += s / static_cast<double>(a[layer].size() * (it.p.end - it.p.start + 1) * (it.g.end - it.g.start + 1));
  }
  return total / static_cast<double>(items.size());
}

// Random causal attention field stored both densely and as a trace.
struct RandomField {
  Dense dense;
  attnmod::AttentionTrace trace;
};

inline RandomField random_field(std::size_t n_layers, std::size_t n_heads, std::size_t n_pos, std::mt19937_64& rng,
                                double peak = 3.0) {
  std::normal_distribution<double> nd(0.0, peak);
  std::bernoulli_distribution zero(0.05);
  RandomField f;
  f.trace = attnmod::AttentionTrace(n_layers, n_heads, attnmod::TraceRequest::all(), 0, n_pos, 1);
  f.dense.assign(n_layers, std::vector<std::vector<std::vector<double>>>(
                               n_heads, std::vector<std::vector<double>>(n_pos, std::vector<double>(n_pos, 0.0))));
  for (std::size_t l = 0; l < n_layers; ++l)
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t i = 0; i < n_pos; ++i) {
        std::vector<float> row(i + 1);
        double z = 0.0;
        for (auto& v : row) {
          // Occasional exact zeros exercise the 0 ln 0 convention.
          v = zero(rng) && i > 0 ? 0.0f : static_cast<float>(std::exp(nd(rng)));
          z += v;
        }
        auto dst = f.trace.mutable_row(l, h, i);
        for (std::size_t j = 0; j <= i; ++j) {
          dst[j] = static_cast<float>(row[j] / z);
          f.dense[l][h][i][j] = dst[j];
        }
      }
  return f;
}

// Beam search by full recomputation of every hypothesis (no cache, no
// modulation). Mirrors the documented selection rules.
struct RefHypothesis {
  std::vector<TokenId> tokens;
  double score = 0.0;
  std::size_t scored = 0;
  bool done = false;
};

inline double final_score(const RefHypothesis& h, bool normalized) {
  return normalized && h.scored > 0 ? h.score / static_cast<double>(h.scored) : h.score;
}

inline RefHypothesis beam_search(const Model& model, const std::vector<TokenId>& prompt, std::size_t width,
                                 std::size_t max_new, std::optional<TokenId> eos, bool normalized) {
  std::vector<RefHypothesis> live{RefHypothesis{}}, finished;
  for (std::size_t t = 1; t <= max_new && !live.empty(); ++t) {
    struct Cand {
      std::size_t b;
      TokenId tok;
      double lp;
      double score;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      std::vector<TokenId> seq = prompt;
      seq.insert(seq.end(), live[b].tokens.begin(), live[b].tokens.end());
      const auto fr = forward(model, seq);
      const auto& lg = fr.logits.back();
      const double mx = *std::max_element(lg.begin(), lg.end());
      double z = 0.0;
      for (double v : lg) z += std::exp(v - mx);
      for (std::size_t k = 0; k < lg.size(); ++k) {
        const double lp = lg[k] - mx - std::log(z);
        cands.push_back({b, static_cast<TokenId>(k), lp, live[b].score + lp});
      }
    }
    std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& c) {
      if (a.score != c.score) return a.score > c.score;
      if (live[a.b].tokens != live[c.b].tokens) return live[a.b].tokens < live[c.b].tokens;
      return a.tok < c.tok;
    });
    cands.resize(std::min(width, cands.size()));
    std::vector<RefHypothesis> next;
    for (const auto& c : cands) {
      RefHypothesis h = live[c.b];
      h.score = c.score;
      ++h.scored;
      if (eos && c.tok == *eos) {
        finished.push_back(h);
        continue;
      }
      h.tokens.push_back(c.tok);
      if (t == max_new) {
        finished.push_back(h);
      } else {
        next.push_back(h);
      }
    }
    live = std::move(next);
  }
  for (auto& h : live) finished.push_back(h);
  return *std::min_element(finished.begin(), finished.end(), [&](const RefHypothesis& a, const RefHypothesis& b) {
    const double sa = final_score(a, normalized), sb = final_score(b, normalized);
    if (sa != sb) return sa > sb;
    if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
    return a.tokens < b.tokens;
  });
}

}  // namespace oracle
