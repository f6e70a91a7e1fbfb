#pragma once

// Sentence-level statistics over attention traces.
//
//   mean  abar^{l,h}_{g,p} = sum_{i in g} sum_{j in p} alpha^{l,h}_{i,j} / (|g| |p|)
//   max   ahat^{l,h}_{g,p} = max_{i in g, j in p} alpha^{l,h}_{i,j}
//   aggregate  alpha^M_{g,p} = mean of a per-(l,h) statistic over layers x heads
//   change     Delta(j, D)  = mean over d in D of |abar^M_{g_{i+1},p_j} - abar^M_{g_i,p_j}|
//   entropy    E(g, p, l)   = -sum_x sum_h sum_{i in g} sum_{j in p} a ln a / (|X| |H| |p| |g|)

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "attnmod/error.hpp"
#include "attnmod/trace.hpp"
#include "attnmod/types.hpp"

namespace attnmod {

enum class SentStat { mean, max };

namespace detail {

inline void check_order(const SentenceSpan& g, const SentenceSpan& p) {
  if (g.start > g.end || p.start > p.end) throw DimensionError("sentence span with start > end");
  if (p.start > g.start) throw DimensionError("key sentence p must not follow query sentence g");
}

inline std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace detail

inline double mean_sent_attn(const AttentionTrace& trace, const SentenceSpan& g, const SentenceSpan& p,
                             std::size_t layer, std::size_t head) {
  detail::check_order(g, p);
  double sum = 0.0;
  for (std::size_t i = g.start; i <= g.end; ++i) {
    const auto row = trace.row(layer, head, i);
    for (std::size_t j = p.start; j <= p.end && j <= i; ++j) sum += row[j];
  }
  return sum / static_cast<double>(g.size() * p.size());
}

inline double max_sent_attn(const AttentionTrace& trace, const SentenceSpan& g, const SentenceSpan& p,
                            std::size_t layer, std::size_t head) {
  detail::check_order(g, p);
  double best = 0.0;
  for (std::size_t i = g.start; i <= g.end; ++i) {
    const auto row = trace.row(layer, head, i);
    for (std::size_t j = p.start; j <= p.end && j <= i; ++j) best = std::max(best, static_cast<double>(row[j]));
  }
  return best;
}

inline double sent_attn(const AttentionTrace& trace, const SentenceSpan& g, const SentenceSpan& p, std::size_t layer,
                        std::size_t head, SentStat stat) {
  return stat == SentStat::mean ? mean_sent_attn(trace, g, p, layer, head) : max_sent_attn(trace, g, p, layer, head);
}

// Values indexed by (layer, head).
struct LayerHeadGrid {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::vector<double> values;

  LayerHeadGrid() = default;
  LayerHeadGrid(std::size_t layers, std::size_t heads, double fill = 0.0)
      : n_layers(layers), n_heads(heads), values(layers * heads, fill) {}

  double& at(std::size_t l, std::size_t h) { return values.at(l * n_heads + h); }
  double at(std::size_t l, std::size_t h) const { return values.at(l * n_heads + h); }
};

inline double aggregate(const LayerHeadGrid& grid, const std::vector<std::size_t>& layers,
                        const std::vector<std::size_t>& heads) {
  if (layers.empty() || heads.empty()) throw DimensionError("aggregate over an empty layer or head set");
  double sum = 0.0;
  for (std::size_t l : layers) {
    for (std::size_t h : heads) sum += grid.at(l, h);
  }
  return sum / static_cast<double>(layers.size() * heads.size());
}

inline double aggregate(const LayerHeadGrid& grid) {
  return aggregate(grid, detail::iota_n(grid.n_layers), detail::iota_n(grid.n_heads));
}

inline LayerHeadGrid sent_attn_grid(const AttentionTrace& trace, const SentenceSpan& g, const SentenceSpan& p,
                                    SentStat stat) {
  LayerHeadGrid grid(trace.n_layers(), trace.n_heads());
  for (std::size_t l = 0; l < trace.n_layers(); ++l) {
    for (std::size_t h = 0; h < trace.n_heads(); ++h) grid.at(l, h) = sent_attn(trace, g, p, l, h, stat);
  }
  return grid;
}

// alpha^M_{g,p} over the given layers (all heads); empty `layers` means all.
inline double aggregated_sent_attn(const AttentionTrace& trace, const SentenceSpan& g, const SentenceSpan& p,
                                   SentStat stat, std::vector<std::size_t> layers = {}) {
  if (layers.empty()) layers = detail::iota_n(trace.n_layers());
  LayerHeadGrid grid(trace.n_layers(), trace.n_heads());
  for (std::size_t l : layers) {
    for (std::size_t h = 0; h < trace.n_heads(); ++h) grid.at(l, h) = sent_attn(trace, g, p, l, h, stat);
  }
  return aggregate(grid, layers, detail::iota_n(trace.n_heads()));
}

// Everything the sentence-level analyses need from one generation.
struct AnalysisRecord {
  AttentionTrace trace;
  std::vector<SentenceSpan> prompt_sentences;
  std::vector<SentenceSpan> generated_sentences;  // absolute positions
  std::vector<std::string> generated_texts;       // one per generated sentence
};

struct SentAttnEntry {
  std::size_t g = 0;  // generated sentence ordinal
  std::size_t p = 0;  // prompt sentence ordinal
  LayerHeadGrid mean;
  LayerHeadGrid max;
  double aggregated_mean = 0.0;
  double aggregated_max = 0.0;
};

struct SentAttnReport {
  std::vector<SentAttnEntry> entries;
};

inline SentAttnReport build_report(const AnalysisRecord& rec, std::size_t max_generated = SIZE_MAX) {
  SentAttnReport report;
  const std::size_t n_g = std::min(max_generated, rec.generated_sentences.size());
  for (std::size_t g = 0; g < n_g; ++g) {
    for (std::size_t p = 0; p < rec.prompt_sentences.size(); ++p) {
      SentAttnEntry e;
      e.g = g;
      e.p = p;
      e.mean = sent_attn_grid(rec.trace, rec.generated_sentences[g], rec.prompt_sentences[p], SentStat::mean);
      e.max = sent_attn_grid(rec.trace, rec.generated_sentences[g], rec.prompt_sentences[p], SentStat::max);
      e.aggregated_mean = aggregate(e.mean);
      e.aggregated_max = aggregate(e.max);
      report.entries.push_back(std::move(e));
    }
  }
  return report;
}

// Delta(j, D) for consecutive generated sentences (g_i, g_{i+1}); both
// indices are zero-based here.
inline double attn_change(const std::vector<const AnalysisRecord*>& records, std::size_t prompt_sentence,
                          std::size_t pair_index) {
  if (records.empty()) throw DimensionError("attention change over an empty record set");
  double sum = 0.0;
  for (const auto* rec : records) {
    if (rec->generated_sentences.size() < pair_index + 2) {
      throw DimensionError("record has too few generated sentences for pair " + std::to_string(pair_index));
    }
    if (rec->prompt_sentences.size() <= prompt_sentence) {
      throw DimensionError("record has too few prompt sentences for index " + std::to_string(prompt_sentence));
    }
    const auto& p = rec->prompt_sentences[prompt_sentence];
    const double a = aggregated_sent_attn(rec->trace, rec->generated_sentences[pair_index], p, SentStat::mean);
    const double b = aggregated_sent_attn(rec->trace, rec->generated_sentences[pair_index + 1], p, SentStat::mean);
    sum += std::abs(b - a);
  }
  return sum / static_cast<double>(records.size());
}

inline double attn_change(const std::vector<AnalysisRecord>& records, std::size_t prompt_sentence,
                          std::size_t pair_index) {
  std::vector<const AnalysisRecord*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  return attn_change(ptrs, prompt_sentence, pair_index);
}

inline std::string trim_sentence(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

struct RepetitionSplit {
  std::vector<const AnalysisRecord*> repeated;
  std::vector<const AnalysisRecord*> different;
};

// Partitions records that have the pair (g_i, g_{i+1}) by exact string
// equality of the two sentences (surrounding whitespace ignored).
inline RepetitionSplit split_by_repetition(const std::vector<AnalysisRecord>& records, std::size_t pair_index) {
  RepetitionSplit split;
  for (const auto& r : records) {
    if (r.generated_texts.size() < pair_index + 2 || r.generated_sentences.size() < pair_index + 2) continue;
    if (trim_sentence(r.generated_texts[pair_index]) == trim_sentence(r.generated_texts[pair_index + 1])) {
      split.repeated.push_back(&r);
    } else {
      split.different.push_back(&r);
    }
  }
  return split;
}

struct EntropyItem {
  const AttentionTrace* trace = nullptr;
  SentenceSpan g;  // query sentence (first generated sentence)
  SentenceSpan p;  // key sentence
};

// Natural-log entropy; zero cells contribute nothing.
inline double attn_entropy(const std::vector<EntropyItem>& items, std::size_t layer) {
  if (items.empty()) throw DimensionError("attention entropy over an empty corpus");
  double total = 0.0;
  double norm = 0.0;
  for (const auto& it : items) {
    detail::check_order(it.g, it.p);
    const std::size_t n_heads = it.trace->n_heads();
    double s = 0.0;
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = it.g.start; i <= it.g.end; ++i) {
        const auto row = it.trace->row(layer, h, i);
        for (std::size_t j = it.p.start; j <= it.p.end && j <= i; ++j) {
          const double a = row[j];
          if (a > 0.0) s -= a * std::log(a);
        }
      }
    }
    total += s / static_cast<double>(n_heads * it.p.size() * it.g.size());
    norm += 1.0;
  }
  return total / norm;
}

// Mean over heads and records of abar^{l,h}_{g_1,p} for each (layer, prompt
// sentence): how attention to each prompt sentence is spread across depth.
inline std::vector<std::vector<double>> attn_portion(const std::vector<AnalysisRecord>& records) {
  if (records.empty()) throw DimensionError("attention portion over an empty corpus");
  const std::size_t n_layers = records.front().trace.n_layers();
  std::size_t n_p = SIZE_MAX;
  for (const auto& r : records) n_p = std::min(n_p, r.prompt_sentences.size());
  std::vector<std::vector<double>> out(n_layers, std::vector<double>(n_p, 0.0));
  std::size_t used = 0;
  for (const auto& r : records) {
    if (r.generated_sentences.empty()) continue;
    ++used;
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (std::size_t p = 0; p < n_p; ++p) {
        double s = 0.0;
        for (std::size_t h = 0; h < r.trace.n_heads(); ++h) {
          s += mean_sent_attn(r.trace, r.generated_sentences[0], r.prompt_sentences[p], l, h);
        }
        out[l][p] += s / static_cast<double>(r.trace.n_heads());
      }
    }
  }
  if (used == 0) throw DimensionError("no record has a generated sentence");
  for (auto& row : out) {
    for (double& v : row) v /= static_cast<double>(used);
  }
  return out;
}

// Per-cell share of two heatmaps: a / (a + b) and b / (a + b).
inline std::pair<LayerHeadGrid, LayerHeadGrid> heatmap_ratio(const LayerHeadGrid& a, const LayerHeadGrid& b) {
  if (a.n_layers != b.n_layers || a.n_heads != b.n_heads) throw DimensionError("heatmap grids differ in shape");
  LayerHeadGrid ra(a.n_layers, a.n_heads), rb(a.n_layers, a.n_heads);
  for (std::size_t k = 0; k < a.values.size(); ++k) {
    const double s = a.values[k] + b.values[k];
    ra.values[k] = s > 0.0 ? a.values[k] / s : 0.5;
    rb.values[k] = s > 0.0 ? b.values[k] / s : 0.5;
  }
  return {ra, rb};
}

inline std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// Rows = layers, columns = heads.
inline void write_heatmap_csv(std::ostream& out, const LayerHeadGrid& grid) {
  out << "layer";
  for (std::size_t h = 0; h < grid.n_heads; ++h) out << ",head_" << h;
  out << '\n';
  for (std::size_t l = 0; l < grid.n_layers; ++l) {
    out << l;
    for (std::size_t h = 0; h < grid.n_heads; ++h) out << ',' << format_number(grid.at(l, h));
    out << '\n';
  }
}

inline LayerHeadGrid read_heatmap_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty heatmap CSV");
  const std::size_t n_heads = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  std::vector<double> values;
  std::size_t n_layers = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    std::size_t cols = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw FormatError("bad heatmap cell '" + cell + "'");
      }
      ++cols;
    }
    if (cols != n_heads) throw FormatError("heatmap row " + std::to_string(n_layers) + " has wrong width");
    ++n_layers;
  }
  LayerHeadGrid grid(n_layers, n_heads);
  grid.values = std::move(values);
  return grid;
}

}  // namespace attnmod
