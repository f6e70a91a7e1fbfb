#pragma once

// Corpus-level degeneration metrics: unique generated tokens, prompt
// relevancy, consecutive-sentence repetition, concept coverage, and the
// covered/uncovered max-attention report.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "attnmod/lexicon.hpp"
#include "attnmod/sentence_attention.hpp"
#include "attnmod/trace.hpp"
#include "attnmod/types.hpp"

namespace attnmod {

inline constexpr std::size_t kAllSentences = SIZE_MAX;

struct EvalRecord {
  TokenSeq prompt_tokens;
  TokenSeq generated_tokens;
  std::vector<SentenceSpan> generated_sentences;  // indices into generated_tokens
  std::vector<std::string> sentence_texts;        // decoded, one per sentence
  std::string generated_text;
  std::vector<std::string> concepts;
};

namespace detail {

// Generated tokens inside the first `horizon` sentences.
inline std::span<const TokenId> horizon_tokens(const EvalRecord& r, std::size_t horizon) {
  if (r.generated_sentences.empty() || horizon == 0) return {};
  const std::size_t k = std::min(horizon, r.generated_sentences.size());
  const std::size_t end = std::min(r.generated_sentences[k - 1].end + 1, r.generated_tokens.size());
  return std::span<const TokenId>(r.generated_tokens).first(end);
}

}  // namespace detail

struct UniqueTokenCount {
  std::size_t types = 0;
  std::size_t occurrences = 0;
};

inline UniqueTokenCount unique_tokens(const std::vector<EvalRecord>& records, std::size_t horizon = kAllSentences) {
  std::unordered_set<TokenId> seen;
  UniqueTokenCount c;
  for (const auto& r : records) {
    for (TokenId t : detail::horizon_tokens(r, horizon)) {
      seen.insert(t);
      ++c.occurrences;
    }
  }
  c.types = seen.size();
  return c;
}

// Percentage of generated token occurrences whose id appears in the record's
// prompt; absent when nothing was generated.
inline std::optional<double> relevancy(const std::vector<EvalRecord>& records, std::size_t horizon = kAllSentences) {
  std::size_t hits = 0, total = 0;
  for (const auto& r : records) {
    const std::unordered_set<TokenId> prompt(r.prompt_tokens.begin(), r.prompt_tokens.end());
    for (TokenId t : detail::horizon_tokens(r, horizon)) {
      ++total;
      if (prompt.contains(t)) ++hits;
    }
  }
  if (total == 0) return std::nullopt;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

// Percentage of consecutive generated-sentence pairs with identical text;
// absent when no record has two sentences within the horizon.
inline std::optional<double> sentence_repetition(const std::vector<EvalRecord>& records,
                                                 std::size_t horizon = kAllSentences) {
  std::size_t repeated = 0, pairs = 0;
  for (const auto& r : records) {
    const std::size_t k = std::min(horizon, r.sentence_texts.size());
    for (std::size_t i = 0; i + 1 < k; ++i) {
      ++pairs;
      if (trim_sentence(r.sentence_texts[i]) == trim_sentence(r.sentence_texts[i + 1])) ++repeated;
    }
  }
  if (pairs == 0) return std::nullopt;
  return 100.0 * static_cast<double>(repeated) / static_cast<double>(pairs);
}

struct CoverageResult {
  std::optional<double> percent;  // mean over records of per-record coverage
  std::vector<std::vector<bool>> covered;
  std::size_t concepts_total = 0;
  std::size_t concepts_covered = 0;
};

inline std::vector<bool> covered_concepts(const InflectionLexicon& lexicon, const std::vector<std::string>& concepts,
                                          const std::string& text) {
  const auto words = split_words(text);
  std::vector<bool> out;
  out.reserve(concepts.size());
  for (const auto& c : concepts) out.push_back(lexicon.covers(c, words));
  return out;
}

inline CoverageResult concept_coverage(const std::vector<EvalRecord>& records, const InflectionLexicon& lexicon) {
  CoverageResult res;
  double sum = 0.0;
  std::size_t counted = 0;
  for (const auto& r : records) {
    auto cov = covered_concepts(lexicon, r.concepts, r.generated_text);
    if (!r.concepts.empty()) {
      const auto n = static_cast<std::size_t>(std::count(cov.begin(), cov.end(), true));
      sum += 100.0 * static_cast<double>(n) / static_cast<double>(r.concepts.size());
      ++counted;
      res.concepts_total += r.concepts.size();
      res.concepts_covered += n;
    }
    res.covered.push_back(std::move(cov));
  }
  if (counted > 0) res.percent = sum / static_cast<double>(counted);
  return res;
}

struct AttentionStats {
  double mean = 0.0;
  double sd = 0.0;  // population standard deviation
  std::size_t count = 0;
};

inline AttentionStats summarize(const std::vector<double>& values) {
  AttentionStats s;
  s.count = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

// One constrained generation with its full trace.
struct CoverageAttentionItem {
  const AttentionTrace* trace = nullptr;
  std::vector<SentenceSpan> concept_sentences;  // prompt positions, one per concept
  std::vector<std::string> concepts;
  SentenceSpan generation;  // absolute positions of the generated tokens
  std::string generated_text;
};

struct CoverageAttentionReport {
  AttentionStats covered;
  std::optional<AttentionStats> uncovered;  // absent when every concept was covered
  std::string note;
  std::vector<double> covered_values;
  std::vector<double> uncovered_values;
};

// Aggregated max sentence attention from the generation to each concept,
// partitioned by whether the concept appears in the generation.
inline CoverageAttentionReport coverage_attention_report(const std::vector<CoverageAttentionItem>& items,
                                                         const InflectionLexicon& lexicon) {
  CoverageAttentionReport rep;
  for (const auto& it : items) {
    const auto cov = covered_concepts(lexicon, it.concepts, it.generated_text);
    for (std::size_t k = 0; k < it.concepts.size(); ++k) {
      const double v = aggregated_sent_attn(*it.trace, it.generation, it.concept_sentences.at(k), SentStat::max);
      (cov[k] ? rep.covered_values : rep.uncovered_values).push_back(v);
    }
  }
  rep.covered = summarize(rep.covered_values);
  if (rep.uncovered_values.empty()) {
    rep.note = "no uncovered concepts";
  } else {
    rep.uncovered = summarize(rep.uncovered_values);
  }
  return rep;
}

}  // namespace attnmod
