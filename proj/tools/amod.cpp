// amod: generate with attention modulation, analyze sentence attention,
// evaluate degeneration metrics, and run concept-order permutations.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "attnmod/cli.hpp"

namespace cli = attnmod::cli;

namespace {

struct Overrides {
  std::string config_path;
  cli::KeyValues kv;  // flag values, applied after the config file
};

void add_run_flags(CLI::App* app, Overrides& o) {
  auto opt = [&](const char* flag, const char* key, const char* help) {
    app->add_option_function<std::string>(flag, [&o, key](const std::string& v) { o.kv.values[key] = v; }, help);
  };
  app->add_option("--config", o.config_path, "Flat key = value config file");
  opt("--model", "model", "Weight file, or a directory with model.bin and vocab.json");
  opt("--vocab", "vocab", "Vocabulary file (defaults to the model directory)");
  opt("--merges", "merges", "BPE merges file");
  opt("--lexicon", "lexicon", "Inflection lexicon (TSV: lemma, forms...)");
  opt("--corpus,-i", "corpus", "Input corpus (JSONL)");
  opt("--output,-o", "output", "Output directory");
  opt("--task", "task", "narrative | abductive | constrained");
  opt("--strategy", "strategy", "none | balanced_context | coverage");
  opt("--layer-start", "layer_start", "First modulated layer");
  opt("--layer-end", "layer_end", "One past the last modulated layer");
  opt("--scale", "scale", "Bias scale");
  opt("--clip", "clip", "Bias clip (inf for none)");
  opt("--decoder", "decoder", "greedy | beam");
  opt("--beam", "beam", "Beam width");
  opt("--max-new-tokens", "max_new_tokens", "Generation budget");
  opt("--max-sentences", "max_sentences", "Stop after this many sentences (0 = off)");
  opt("--scoring", "scoring", "normalized | raw");
  opt("--trace", "trace", "none | modulated | all");
  opt("--seed", "seed", "Recorded with the run; decoding is deterministic");
  opt("--workers", "workers", "Worker threads");
  opt("--permutation-cap", "permutation_cap", "Largest concept count to permute");
}

cli::RunConfig build_config(const Overrides& o) {
  cli::RunConfig cfg;
  if (!o.config_path.empty()) {
    cfg.apply(cli::load_flat_config(o.config_path), std::filesystem::path(o.config_path).parent_path());
  }
  cfg.apply(o.kv);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention modulation for small causal language models"};
  app.require_subcommand(1);

  Overrides gen_o, perm_o;
  auto* gen = app.add_subcommand("generate", "Decode every corpus prompt into generations.jsonl");
  add_run_flags(gen, gen_o);
  auto* perm = app.add_subcommand("permute", "Coverage decoding over concept-order permutations");
  add_run_flags(perm, perm_o);

  std::string an_kind, an_in, an_out = ".";
  std::size_t an_g = 0;
  auto* an = app.add_subcommand("analyze", "Sentence attention tables from traced generations");
  an->add_option("kind", an_kind, "heatmap | change | entropy | portion")->required();
  an->add_option("--input,-i", an_in, "generations.jsonl written with --trace all")->required();
  an->add_option("--output,-o", an_out, "Output directory");
  an->add_option("--generated-sentence,-g", an_g, "Heatmap: generated sentence index");

  std::string ev_in, ev_out = ".", ev_lex;
  bool ev_no_stem = false;
  auto* ev = app.add_subcommand("eval", "Degeneration and coverage metrics");
  ev->add_option("--input,-i", ev_in, "generations.jsonl")->required();
  ev->add_option("--output,-o", ev_out, "Output directory");
  ev->add_option("--lexicon", ev_lex, "Inflection lexicon (TSV)");
  ev->add_flag("--no-stemmer", ev_no_stem, "Match lexicon forms only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kExitOk : cli::kExitUsage;
  }

  cli::Log log(std::cerr);
  try {
    if (*gen || *perm) {
      const bool permute = static_cast<bool>(*perm);
      auto cfg = build_config(permute ? perm_o : gen_o);
      if (cfg.corpus_path.empty()) throw attnmod::ConfigError("no corpus given (--corpus or corpus = ...)");
      auto rt = cli::load_runtime(std::move(cfg), log);
      const auto out = (std::filesystem::path(rt.config.output_dir) / (permute ? "permutations.jsonl" : "generations.jsonl")).string();
      const auto s = permute ? cli::cmd_permute(std::move(rt), out, log) : cli::cmd_generate(rt, out, log);
      log.note("wrote " + std::to_string(s.written) + " records to " + out +
               (s.skipped ? " (" + std::to_string(s.skipped) + " skipped)" : ""));
    } else if (*an) {
      const auto files = cli::cmd_analyze(cli::parse_analysis_kind(an_kind), an_in, an_out, {an_g}, log);
      for (const auto& f : files) std::cout << (std::filesystem::path(an_out) / f).string() << '\n';
    } else if (*ev) {
      attnmod::InflectionLexicon lex(!ev_no_stem);
      if (!ev_lex.empty()) lex = attnmod::InflectionLexicon::load(ev_lex, !ev_no_stem);
      const auto report = cli::cmd_eval(ev_in, ev_out, lex, log);
      std::cout << report.dump(2) << '\n';
    }
  } catch (const attnmod::ConfigError& e) {
    std::cerr << "amod: error: " << e.what() << '\n';
    return cli::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "amod: error: " << e.what() << '\n';
    return cli::kExitData;
  }
  return cli::kExitOk;
}
