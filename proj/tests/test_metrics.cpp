#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "attnmod/metrics.hpp"
#include "metric_fixture.hpp"
#include "oracles.hpp"

using namespace attnmod;

TEST(Metrics, HandCountedFixture) {
  const auto recs = metric_fixture::ten_records();
  EXPECT_EQ(*sentence_repetition(recs), 62.5);
  EXPECT_EQ(*sentence_repetition(recs, 2), 50.0);
  const auto u = unique_tokens(recs);
  EXPECT_EQ(u.types, 16u);
  EXPECT_EQ(u.occurrences, 70u);
  EXPECT_EQ(*relevancy(recs), 100.0 * 54.0 / 70.0);
}

TEST(Metrics, CoverageFixture) {
  const auto cov = concept_coverage(metric_fixture::coverage_records(), metric_fixture::lexicon());
  EXPECT_EQ(*cov.percent, 70.0);
  EXPECT_EQ(cov.concepts_covered, 8u);
  EXPECT_EQ(cov.concepts_total, 12u);
  EXPECT_EQ(cov.covered[4], (std::vector<bool>{true, false, false, true}));
}

TEST(Metrics, CampSentenceIsHalfCovered) {
  EvalRecord r;
  r.generated_text = "person runs a drill during a practice at training camp.";
  r.concepts = {"run", "team", "field", "drill"};
  EXPECT_EQ(*concept_coverage({r}, InflectionLexicon()).percent, 50.0);
}

TEST(UniqueTokens, SmallCases) {
  EvalRecord a, b;
  a.generated_tokens = {1, 2};
  b.generated_tokens = {2, 3};
  a.generated_sentences = {{0, 1, SpanRole::generated, 0}};
  b.generated_sentences = {{0, 1, SpanRole::generated, 0}};
  EXPECT_EQ(unique_tokens({a, b}).types, 3u);
  EXPECT_EQ(unique_tokens({}).types, 0u);
}

TEST(UniqueTokens, MatchesSetUnion) {
  std::mt19937_64 rng(6);
  std::vector<EvalRecord> recs(20);
  std::set<TokenId> all;
  for (auto& r : recs) {
    r.generated_tokens = fixtures::random_tokens(rng, 1 + rng() % 15, 40);
    r.generated_sentences = {{0, r.generated_tokens.size() - 1, SpanRole::generated, 0}};
    all.insert(r.generated_tokens.begin(), r.generated_tokens.end());
  }
  EXPECT_EQ(unique_tokens(recs).types, all.size());
}

TEST(Relevancy, HandCases) {
  EvalRecord r;
  r.prompt_tokens = {1, 2, 3};
  r.generated_tokens = {1, 4};
  r.generated_sentences = {{0, 1, SpanRole::generated, 0}};
  EXPECT_EQ(*relevancy({r}), 50.0);
  r.generated_tokens = {3, 2};
  EXPECT_EQ(*relevancy({r}), 100.0);
  r.generated_tokens = {7, 8};
  EXPECT_EQ(*relevancy({r}), 0.0);
  EXPECT_FALSE(relevancy({EvalRecord{}}).has_value());
}

TEST(Repetition, HandCases) {
  auto rec = [](std::vector<std::string> s) {
    EvalRecord r;
    r.sentence_texts = std::move(s);
    return r;
  };
  EXPECT_EQ(*sentence_repetition({rec({"s.", "s.", "u."})}), 50.0);
  EXPECT_EQ(*sentence_repetition({rec({"s.", "t.", "u."})}), 0.0);
  EXPECT_EQ(*sentence_repetition({rec({"s.", " s.", "s. "})}), 100.0);
  EXPECT_FALSE(sentence_repetition({rec({"only one."}), rec({"another."})}).has_value());
}

TEST(Coverage, LexiconAndStemmer) {
  InflectionLexicon lex(false);
  lex.add("swim", {"swimming", "swam", "swum"});
  EXPECT_TRUE(lex.covers("swim", std::string_view("she was swimming fast")));
  EXPECT_FALSE(lex.covers("swim", std::string_view("swimsuit")));
  InflectionLexicon stem;
  EXPECT_TRUE(stem.covers("stop", std::string_view("the bus stopped")));
  EXPECT_TRUE(stem.covers("dance", std::string_view("they were dancing")));
  EXPECT_TRUE(stem.covers("city", std::string_view("two cities")));
  EXPECT_FALSE(stem.covers("cat", std::string_view("concatenate")));
  EXPECT_TRUE(stem.covers("ice cream", std::string_view("we ate ice creams.")));
  EXPECT_FALSE(stem.covers("ice cream", std::string_view("ice and cream")));
}

TEST(Coverage, AllLemmasVerbatim) {
  EvalRecord r;
  r.generated_text = "field stand look";
  r.concepts = {"field", "stand", "look"};
  EXPECT_EQ(*concept_coverage({r}, InflectionLexicon()).percent, 100.0);
}

TEST(Coverage, LexiconFileLoads) {
  fixtures::TempDir dir;
  std::ofstream(dir.file("lex.tsv")) << "# lemma\tforms\nswim\tswimming\tswam\tswum\n\ngo\twent\tgone\n";
  const auto lex = InflectionLexicon::load(dir.file("lex.tsv"), false);
  EXPECT_EQ(lex.size(), 2u);
  EXPECT_TRUE(lex.covers("go", std::string_view("she went home")));
  EXPECT_THROW(InflectionLexicon::load(dir.file("missing.tsv")), FormatError);
}

TEST(Coverage, MonotoneUnderAppendedWords) {
  std::mt19937_64 rng(3);
  const std::vector<std::string> words = {"run", "runs", "team", "the", "fields", "drilled", "a", "."};
  const std::vector<std::string> concepts = {"run", "team", "field", "drill"};
  InflectionLexicon lex;
  for (int trial = 0; trial < 50; ++trial) {
    std::string text;
    std::size_t prev = 0;
    for (int k = 0; k < 8; ++k) {
      text += " " + words[rng() % words.size()];
      const auto cov = covered_concepts(lex, concepts, text);
      const auto n = static_cast<std::size_t>(std::count(cov.begin(), cov.end(), true));
      EXPECT_GE(n, prev);
      prev = n;
    }
  }
}

TEST(Metrics, OrderInvariant) {
  auto recs = metric_fixture::ten_records();
  std::mt19937_64 rng(1);
  std::shuffle(recs.begin(), recs.end(), rng);
  EXPECT_EQ(*sentence_repetition(recs), 62.5);
  EXPECT_EQ(unique_tokens(recs).types, 16u);
  EXPECT_NEAR(*relevancy(recs), 100.0 * 54.0 / 70.0, 1e-12);
}

namespace {

// One layer, one head. Concepts at positions 0 and 2, generation at 5..6.
AttentionTrace hand_trace(float c0_a, float c0_b, float c1_a, float c1_b) {
  AttentionTrace t(1, 1, TraceRequest::all(), 0, 7);
  t.mutable_row(0, 0, 5)[0] = c0_a;
  t.mutable_row(0, 0, 6)[0] = c0_b;
  t.mutable_row(0, 0, 5)[2] = c1_a;
  t.mutable_row(0, 0, 6)[2] = c1_b;
  return t;
}

CoverageAttentionItem item(const AttentionTrace& t, std::string text) {
  return {&t,
          {{0, 0, SpanRole::prompt, 0}, {2, 2, SpanRole::prompt, 1}},
          {"dog", "cat"},
          {5, 6, SpanRole::generated, 0},
          std::move(text)};
}

}  // namespace

TEST(CoverageReport, HandBuiltTraces) {
  const auto t1 = hand_trace(0.6f, 0.2f, 0.1f, 0.3f);
  const auto t2 = hand_trace(0.1f, 0.4f, 0.05f, 0.25f);
  const auto rep = coverage_attention_report({item(t1, "dog ."), item(t2, "two dogs .")}, InflectionLexicon());
  EXPECT_EQ(rep.covered.count, 2u);
  EXPECT_NEAR(rep.covered.mean, 0.5, 1e-7);
  EXPECT_NEAR(rep.covered.sd, 0.1, 1e-7);
  ASSERT_TRUE(rep.uncovered.has_value());
  EXPECT_EQ(rep.uncovered->count, 2u);
  EXPECT_NEAR(rep.uncovered->mean, 0.275, 1e-7);
  EXPECT_NEAR(rep.uncovered->sd, 0.025, 1e-7);
}

TEST(CoverageReport, SingleCoveredConcept) {
  AttentionTrace t(1, 1, TraceRequest::all(), 0, 4);
  t.mutable_row(0, 0, 3)[0] = 0.7f;
  CoverageAttentionItem it{&t, {{0, 0, SpanRole::prompt, 0}}, {"dog"}, {2, 3, SpanRole::generated, 0}, "the dog"};
  const auto rep = coverage_attention_report({it}, InflectionLexicon());
  EXPECT_EQ(rep.covered.count, 1u);
  EXPECT_EQ(rep.uncovered_values.size(), 0u);
  EXPECT_FALSE(rep.uncovered.has_value());
  EXPECT_FALSE(rep.note.empty());
}

TEST(CoverageReport, PartitionCountsSumToConcepts) {
  std::mt19937_64 rng(2);
  const auto f = oracle::random_field(2, 2, 7, rng);
  std::vector<CoverageAttentionItem> items;
  for (const char* text : {"dog", "cat", "dog cat", "bird"}) items.push_back(item(f.trace, text));
  const auto rep = coverage_attention_report(items, InflectionLexicon());
  EXPECT_EQ(rep.covered.count + rep.uncovered->count, 8u);
}
