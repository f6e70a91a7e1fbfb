#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "attnmod/cli.hpp"
#include "fixtures.hpp"
#include "metric_fixture.hpp"

namespace {

using attnmod::cli::json;
namespace cli = attnmod::cli;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

std::vector<json> jsonl(const std::string& path) {
  std::vector<json> out;
  std::ifstream in(path);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

struct Run {
  int code = -1;
  std::string err;
};

// Runs the amod binary with stderr captured.
Run amod(const fixtures::TempDir& dir, const std::string& args) {
  const std::string err = dir.file("stderr.txt");
  const std::string cmd = std::string(AMOD_BIN) + " " + args + " > " + dir.file("stdout.txt") + " 2> " + err;
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err);
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    model = dir.file("model");
    const std::string cmd =
        std::string(AMOD_TOY_BIN) + " -o " + model + " --layers 2 --heads 2 --d-model 16 --seed 7 > /dev/null";
    ASSERT_EQ(std::system(cmd.c_str()), 0);
  }

  fixtures::TempDir dir;
  std::string model;
};

TEST(FlatConfig, CommentsSectionsAndQuotes) {
  std::istringstream in(
      "# run settings\n"
      "task = constrained\n"
      "scale = 2.5   # trailing comment\n"
      "output = \"out # dir\"\n"
      "[decode]\n"
      "beam = 3\n");
  const auto kv = cli::parse_flat_config(in);
  EXPECT_EQ(kv.values.at("task"), "constrained");
  EXPECT_EQ(kv.values.at("scale"), "2.5");
  EXPECT_EQ(kv.values.at("output"), "out # dir");
  EXPECT_EQ(kv.values.at("decode.beam"), "3");
  EXPECT_EQ(kv.lines.at("decode.beam"), 6u);
}

TEST(FlatConfig, SyntaxErrorsNameTheLine) {
  std::istringstream in("task = narrative\njust words\n");
  try {
    cli::parse_flat_config(in, "run.toml");
    FAIL() << "expected ConfigError";
  } catch (const attnmod::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.toml:2"), std::string::npos);
  }
}

TEST(FlatConfig, UnknownKeyRejected) {
  std::istringstream in("\n\nlayer_stop = 4\n");
  cli::RunConfig cfg;
  try {
    cfg.apply(cli::parse_flat_config(in));
    FAIL() << "expected ConfigError";
  } catch (const attnmod::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("layer_stop"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST(FlatConfig, ValuesParsedAndPathsResolved) {
  std::istringstream in(
      "model = m/model.bin\nclip = inf\nstrategy = coverage\ntask = constrained\nlayer_start = 1\n"
      "layer_end = 2\ntrace = modulated\nstop_at_eos = false\n");
  cli::RunConfig cfg;
  cfg.apply(cli::parse_flat_config(in), "/base");
  EXPECT_EQ(cfg.model_path, "/base/m/model.bin");
  EXPECT_TRUE(std::isinf(cfg.modulation.clip));
  EXPECT_EQ(cfg.modulation.strategy, attnmod::Strategy::coverage);
  EXPECT_TRUE(cfg.layers_explicit);
  EXPECT_EQ(cfg.trace, cli::TracePolicy::modulated);
  EXPECT_FALSE(cfg.stop_at_eos);
  EXPECT_NO_THROW(cfg.validate());
}

TEST(FlatConfig, BadValuesRejected) {
  for (const char* text : {"beam = -1\n", "scale = big\n", "trace = some\n", "stop_at_eos = maybe\n",
                           "decoder = sample\n", "strategy = louder\n"}) {
    std::istringstream in(text);
    cli::RunConfig cfg;
    EXPECT_THROW(cfg.apply(cli::parse_flat_config(in)), attnmod::ConfigError) << text;
  }
  cli::RunConfig cfg;
  cfg.modulation.strategy = attnmod::Strategy::coverage;
  EXPECT_THROW(cfg.validate(), attnmod::ConfigError);
}

TEST(WorkerPool, EveryIndexOnceAndErrorsKeptPerIndex) {
  std::vector<int> hits(100, 0);
  const auto errors = cli::parallel_for(hits.size(), 4, [&](std::size_t i) {
    ++hits[i];
    if (i % 10 == 3) throw attnmod::FormatError("bad " + std::to_string(i));
  });
  for (std::size_t i = 0; i < hits.size(); ++i) {
    EXPECT_EQ(hits[i], 1);
    EXPECT_EQ(static_cast<bool>(errors[i]), i % 10 == 3);
  }
  EXPECT_EQ(cli::describe(errors[13]), "bad 13");
}

TEST(Corpus, MalformedLinesSkipped) {
  fixtures::TempDir dir;
  spit(dir.file("c.jsonl"), "{\"prompt\": \"a.\"}\n{oops\n\n[1,2]\n{\"text\": \"x\"}\n{\"prompt\": \"b.\"}\n");
  std::ostringstream log_out;
  cli::Log log(log_out);
  const auto items = cli::read_corpus(dir.file("c.jsonl"), attnmod::TaskMode::narrative, log);
  ASSERT_EQ(items.size(), 2u);
  EXPECT_EQ(items[0].line, 1u);
  EXPECT_EQ(items[1].line, 6u);
  const auto msgs = log_out.str();
  EXPECT_NE(msgs.find("c.jsonl:2"), std::string::npos);
  EXPECT_NE(msgs.find("c.jsonl:4"), std::string::npos);
  EXPECT_NE(msgs.find("c.jsonl:5"), std::string::npos);
}

TEST_F(CliTest, EmptyCorpusGivesEmptyOutput) {
  spit(dir.file("empty.jsonl"), "");
  const auto r = amod(dir, "generate --model " + model + " -i " + dir.file("empty.jsonl") + " -o " + dir.file("out"));
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir.file("out/generations.jsonl")), "");
}

TEST_F(CliTest, OutputIsDeterministicAcrossWorkerCounts) {
  std::string corpus;
  for (int k = 0; k < 6; ++k) {
    corpus += "{\"prompt\": \"the dog ran. she sat. he ate. we went home. it was night.\", \"id\": " +
              std::to_string(k) + "}\n";
  }
  spit(dir.file("n.jsonl"), corpus);
  const std::string common = "generate --model " + model + " -i " + dir.file("n.jsonl") +
                             " --task narrative --strategy balanced_context --max-new-tokens 10 --trace all";
  ASSERT_EQ(amod(dir, common + " -o " + dir.file("a") + " --workers 1").code, 0);
  ASSERT_EQ(amod(dir, common + " -o " + dir.file("b") + " --workers 3").code, 0);
  const auto a = slurp(dir.file("a/generations.jsonl"));
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(dir.file("b/generations.jsonl")));
  const auto recs = jsonl(dir.file("a/generations.jsonl"));
  ASSERT_EQ(recs.size(), 6u);
  for (int k = 0; k < 6; ++k) EXPECT_EQ(recs[k]["id"], k);
}

TEST_F(CliTest, ConceptPromptParsesToFourConcepts) {
  spit(dir.file("c.jsonl"), "{\"prompt\": \"run. team. field. drill. =\"}\n");
  const auto r = amod(dir, "generate --model " + model + " -i " + dir.file("c.jsonl") + " -o " + dir.file("out") +
                               " --task constrained --strategy coverage --max-new-tokens 6");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto recs = jsonl(dir.file("out/generations.jsonl"));
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0]["concepts"], json({"run", "team", "field", "drill"}));
  EXPECT_EQ(recs[0]["concept_spans"].size(), 4u);
}

TEST_F(CliTest, ModelDirectoryFromEnvironment) {
  spit(dir.file("n.jsonl"), "{\"prompt\": \"the dog ran.\"}\n");
  spit(dir.file("c.toml"), "narrative_sentences = 0\n");
  const std::string args = "generate -i " + dir.file("n.jsonl") + " -o " + dir.file("out") +
                           " --task narrative --max-new-tokens 4 --config " + dir.file("c.toml");
  unsetenv(cli::kModelDirEnv);
  EXPECT_EQ(amod(dir, args).code, 1);
  ASSERT_EQ(setenv(cli::kModelDirEnv, model.c_str(), 1), 0);
  const auto r = amod(dir, args);
  unsetenv(cli::kModelDirEnv);
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(jsonl(dir.file("out/generations.jsonl")).size(), 1u);
}

class TracedCliTest : public CliTest {
 protected:
  void SetUp() override {
    CliTest::SetUp();
    spit(dir.file("n.jsonl"),
         "{\"prompt\": \"the dog ran. she sat.\"}\n{\"prompt\": \"a cat ate. they went home.\"}\n");
    spit(dir.file("c.toml"), "narrative_sentences = 0\nmax_new_tokens = 14\ntrace = all\n");
    const auto r = amod(dir, "generate --config " + dir.file("c.toml") + " --model " + model + " -i " +
                                 dir.file("n.jsonl") + " -o " + dir.file("gen") + " --strategy none");
    ASSERT_EQ(r.code, 0) << r.err;
    gens = dir.file("gen/generations.jsonl");
  }
  std::string gens;
};

TEST_F(TracedCliTest, GenerationRecordSchema) {
  const auto recs = jsonl(gens);
  ASSERT_EQ(recs.size(), 2u);
  for (const char* key : {"line", "task", "strategy", "prompt", "prompt_tokens", "prompt_sentences", "generated_tokens",
                          "generated_text", "generated_sentences", "sentence_texts", "score", "normalized_score",
                          "scored_tokens", "hit_eos", "truncated", "trace"}) {
    EXPECT_TRUE(recs[0].contains(key)) << key;
  }
  EXPECT_EQ(recs[0]["prompt_sentences"], json::parse("[[0,3],[4,6]]"));
  const auto& t = recs[0]["trace"];
  EXPECT_EQ(t["n_layers"], 2);
  EXPECT_EQ(t["n_heads"], 2);
  EXPECT_EQ(t["slots"].size(), 4u);
  EXPECT_EQ(recs[0]["sentence_texts"].size(), recs[0]["generated_sentences"].size());
  // Round trip through the loader keeps every traced value.
  const auto loaded = cli::parse_record(recs[0]);
  EXPECT_EQ(cli::detail::trace_json(loaded.analysis.trace), t);
}

TEST_F(TracedCliTest, HeatmapIsLayerByHead) {
  const auto r = amod(dir, "analyze heatmap -i " + gens + " -o " + dir.file("an"));
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(dir.file("an/heatmap_g0_p0.csv"));
  const auto grid = attnmod::read_heatmap_csv(in);
  EXPECT_EQ(grid.n_layers, 2u);
  EXPECT_EQ(grid.n_heads, 2u);
  for (double v : grid.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  // Two prompt sentences: the ratio maps sum to one cell by cell.
  std::ifstream ra(dir.file("an/heatmap_ratio_g0_p0.csv")), rb(dir.file("an/heatmap_ratio_g0_p1.csv"));
  const auto a = attnmod::read_heatmap_csv(ra), b = attnmod::read_heatmap_csv(rb);
  for (std::size_t k = 0; k < a.values.size(); ++k) EXPECT_NEAR(a.values[k] + b.values[k], 1.0, 1e-9);
}

TEST_F(TracedCliTest, PortionIsLayerByPromptSentence) {
  ASSERT_EQ(amod(dir, "analyze portion -i " + gens + " -o " + dir.file("an")).code, 0);
  std::ifstream in(dir.file("an/portion.csv"));
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 3u);
  EXPECT_EQ(lines[0], "layer,p0,p1");
  for (std::size_t k = 1; k < lines.size(); ++k) EXPECT_EQ(std::count(lines[k].begin(), lines[k].end(), ','), 2);
}

TEST_F(TracedCliTest, EntropyRowsPerLayerAndSentence) {
  ASSERT_EQ(amod(dir, "analyze entropy -i " + gens + " -o " + dir.file("an")).code, 0);
  std::ifstream in(dir.file("an/entropy.csv"));
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], "layer,prompt_sentence,entropy");
  EXPECT_EQ(lines[1].rfind("0,0,", 0), 0u);
  EXPECT_EQ(lines[4].rfind("1,1,", 0), 0u);
}

TEST_F(TracedCliTest, ChangeSplitsRepeatedFromDifferent) {
  // Force the first record's first two sentences to repeat and the second's
  // to differ; the traces stay as generated.
  auto recs = jsonl(gens);
  std::string edited;
  for (std::size_t k = 0; k < recs.size(); ++k) {
    auto& r = recs[k];
    r["generated_sentences"] = json::array();
    const std::size_t start = r["prompt_tokens"].size();
    r["generated_sentences"].push_back({start, start + 1});
    r["generated_sentences"].push_back({start + 2, start + 3});
    r["sentence_texts"] = k == 0 ? json({"x y.", " x y."}) : json({"x y.", "z w."});
    edited += r.dump() + "\n";
  }
  spit(dir.file("edited.jsonl"), edited);
  ASSERT_EQ(amod(dir, "analyze change -i " + dir.file("edited.jsonl") + " -o " + dir.file("an")).code, 0);
  std::ifstream in(dir.file("an/change.csv"));
  std::map<std::string, std::string> count_of;
  std::map<std::string, double> delta_of;
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "subset,pair,prompt_sentence,delta,count");
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    ASSERT_EQ(f.size(), 5u) << line;
    const auto key = f[0] + "/" + f[1] + "/" + f[2];
    count_of[key] = f[4];
    delta_of[key] = std::stod(f[3]);
  }
  EXPECT_EQ(count_of["all/0/0"], "2");
  EXPECT_EQ(count_of["repeated/0/0"], "1");
  EXPECT_EQ(count_of["different/0/1"], "1");
  for (const char* p : {"0", "1"}) {
    const std::string q = p;
    EXPECT_NEAR(delta_of["all/0/" + q], 0.5 * (delta_of["repeated/0/" + q] + delta_of["different/0/" + q]), 1e-9);
    EXPECT_EQ(delta_of["all/all/" + q], delta_of["all/0/" + q]);
  }
}

TEST_F(CliTest, AnalyzeWithoutTracesExitsWithDataError) {
  spit(dir.file("n.jsonl"), "{\"prompt\": \"the dog ran.\"}\n");
  spit(dir.file("c.toml"), "narrative_sentences = 0\nmax_new_tokens = 4\n");
  ASSERT_EQ(amod(dir, "generate --config " + dir.file("c.toml") + " --model " + model + " -i " + dir.file("n.jsonl") +
                          " -o " + dir.file("gen"))
                .code,
            0);
  const auto r = amod(dir, "analyze heatmap -i " + dir.file("gen/generations.jsonl") + " -o " + dir.file("an"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--trace all"), std::string::npos) << r.err;
}

TEST_F(CliTest, ExitCodes) {
  spit(dir.file("n.jsonl"), "{\"prompt\": \"the dog ran.\"}\n");
  spit(dir.file("bad.toml"), "layer_stop = 3\n");
  EXPECT_EQ(amod(dir, "").code, 1);
  EXPECT_EQ(amod(dir, "frobnicate").code, 1);
  EXPECT_EQ(amod(dir, "generate --config " + dir.file("bad.toml") + " -i " + dir.file("n.jsonl")).code, 1);
  EXPECT_EQ(amod(dir, "generate --model " + model + " -i " + dir.file("n.jsonl") + " --strategy loud").code, 1);
  EXPECT_EQ(amod(dir, "generate --model " + model + " -i " + dir.file("n.jsonl") + " --layer-end 9 --layer-start 0" +
                          " --strategy balanced_context")
                .code,
            1);
  EXPECT_EQ(amod(dir, "generate --model " + dir.file("missing.bin") + " --vocab " + model + "/vocab.json -i " +
                          dir.file("n.jsonl"))
                .code,
            2);
  EXPECT_EQ(amod(dir, "eval -i " + dir.file("nope.jsonl")).code, 2);
  spit(dir.file("c.jsonl"), "{\"concepts\": [\"dog\", \"cat\", \"ball\", \"team\", \"field\", \"park\"]}\n");
  EXPECT_EQ(amod(dir, "permute --model " + model + " -i " + dir.file("c.jsonl") + " --task constrained").code, 1);
}

TEST_F(CliTest, PermuteKeepsBestOrder) {
  spit(dir.file("c.jsonl"), "{\"concepts\": [\"run\", \"dog\", \"ball\"]}\n");
  const auto r = amod(dir, "permute --model " + model + " -i " + dir.file("c.jsonl") + " -o " + dir.file("p") +
                               " --task constrained --max-new-tokens 8 --lexicon " + model + "/lexicon.tsv");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto recs = jsonl(dir.file("p/permutations.jsonl"));
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0]["permutations"].size(), 6u);
  std::size_t best = 0;
  for (const auto& p : recs[0]["permutations"]) best = std::max(best, p["covered"].get<std::size_t>());
  EXPECT_EQ(recs[0]["concepts_covered"], best);
  EXPECT_EQ(recs[0]["order_weights"].size(), 3u);
}

// Hand-built records: three sentences each, the first pair repeated in one
// record only, so two of four consecutive pairs repeat.
TEST(EvalCommand, RepetitionFromRecords) {
  fixtures::TempDir dir;
  auto record = [](std::vector<std::string> texts) {
    json r;
    r["prompt_tokens"] = {1, 2, 3};
    json spans = json::array();
    std::vector<int> gen;
    for (std::size_t k = 0; k < texts.size(); ++k) {
      spans.push_back({3 + 2 * k, 4 + 2 * k});
      gen.push_back(10 + static_cast<int>(k));
      gen.push_back(0);
    }
    r["generated_tokens"] = gen;
    r["generated_sentences"] = spans;
    r["sentence_texts"] = texts;
    r["generated_text"] = "";
    r["prompt_sentences"] = json::parse("[[0,2]]");
    return r.dump();
  };
  spit(dir.file("g.jsonl"), record({"a b.", "a b.", "c d."}) + "\n" + record({"e f.", "g h.", "g h."}) + "\n");
  const auto r = amod(dir, "eval -i " + dir.file("g.jsonl") + " -o " + dir.file("ev"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = json::parse(slurp(dir.file("ev/report.json")));
  EXPECT_DOUBLE_EQ(report["repetition"]["all"].get<double>(), 50.0);
  EXPECT_DOUBLE_EQ(report["repetition"]["2"].get<double>(), 50.0);
  EXPECT_TRUE(report["repetition"]["1"].is_null());
  EXPECT_EQ(report["unique_tokens"]["all"], 4);
  EXPECT_EQ(report["token_occurrences"]["all"], 12);
  EXPECT_EQ(report["records"], 2);
  EXPECT_FALSE(report.contains("coverage"));
  const auto csv = slurp(dir.file("ev/report.csv"));
  EXPECT_EQ(csv.rfind("metric,horizon,value\n", 0), 0u);
  EXPECT_NE(csv.find("repetition,all,50\n"), std::string::npos);
}

// Key tree of a JSON value with leaf types; numbers collapse to "number" and
// null stays distinct so optional metrics are visible.
json schema_of(const json& j) {
  if (j.is_object()) {
    json out = json::object();
    for (const auto& [k, v] : j.items()) out[k] = schema_of(v);
    return out;
  }
  if (j.is_array()) return json::array({j.empty() ? json("empty") : schema_of(j.front())});
  if (j.is_number()) return "number";
  if (j.is_null()) return "null";
  return j.type_name();
}

std::string coverage_corpus() {
  std::string out;
  for (const auto& r : metric_fixture::coverage_records()) {
    json j;
    j["prompt_tokens"] = json::array();
    j["generated_tokens"] = json::array();
    j["generated_sentences"] = json::array();
    j["sentence_texts"] = json::array();
    j["generated_text"] = r.generated_text;
    j["concepts"] = r.concepts;
    j["prompt_sentences"] = json::array();
    out += j.dump() + "\n";
  }
  return out;
}

TEST(EvalCommand, CoverageMatchesHandCount) {
  fixtures::TempDir dir;
  spit(dir.file("g.jsonl"), coverage_corpus());
  spit(dir.file("lex.tsv"), "run\tran\truns\trunning\nsit\tsat\tsits\tsitting\neat\tate\teats\teaten\teating\n");
  const auto r = amod(dir, "eval -i " + dir.file("g.jsonl") + " --lexicon " + dir.file("lex.tsv") + " -o " + dir.file("ev"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto report = json::parse(slurp(dir.file("ev/report.json")));
  EXPECT_EQ(report["coverage"]["percent"].get<double>(), 70.0);
  EXPECT_EQ(report["coverage"]["concepts_covered"], 8);
  EXPECT_EQ(report["coverage"]["concepts_total"], 12);
}

TEST_F(CliTest, EvalReportSchemaMatchesGolden) {
  spit(dir.file("c.jsonl"), "{\"concepts\": [\"run\", \"dog\", \"ball\"]}\n{\"concepts\": [\"cat\", \"sit\"]}\n");
  ASSERT_EQ(amod(dir, "generate --model " + model + " -i " + dir.file("c.jsonl") + " -o " + dir.file("gen") +
                          " --task constrained --strategy coverage --trace all --max-new-tokens 8")
                .code,
            0);
  for (const char* out : {"ev1", "ev2"}) {
    const auto r = amod(dir, "eval -i " + dir.file("gen/generations.jsonl") + " --lexicon " + model +
                                 "/lexicon.tsv -o " + dir.file(out));
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_EQ(slurp(dir.file("ev1/report.json")), slurp(dir.file("ev2/report.json")));
  const auto schema = schema_of(json::parse(slurp(dir.file("ev1/report.json"))));
  // Covered/uncovered stats may be null depending on the toy output.
  auto normalized = schema;
  for (const char* side : {"covered", "uncovered"}) {
    if (normalized["coverage_attention"][side].is_string()) {
      normalized["coverage_attention"][side] = {{"count", "number"}, {"mean", "number"}, {"sd", "number"}};
    }
  }
  normalized["coverage_attention"].erase("note");
  for (auto& [k, v] : normalized["repetition"].items()) v = "number";
  for (auto& [k, v] : normalized["relevancy"].items()) v = "number";
  const auto golden = json::parse(slurp(std::string(GOLDEN_DIR) + "/eval_report_schema.json"));
  EXPECT_EQ(normalized, golden) << normalized.dump(2);
}

}  // namespace
