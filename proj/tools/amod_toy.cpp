// Writes a small random model with a word-level vocabulary, so the amod tool
// can run end to end without converted checkpoints.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attnmod/tokenizer.hpp"
#include "attnmod/toy_model.hpp"
#include "attnmod/weights_io.hpp"

namespace {

const char* kDefaultWords =
    "the a he she they we it was is went saw ran run runs running sat sit sits sitting ate eat eats eating "
    "dog cat ball team field drill park home day night and then after before with to of in on at";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generate a toy model directory (model.bin, vocab.json, lexicon.tsv)"};
  std::string out_dir, words = kDefaultWords;
  std::size_t layers = 2, heads = 2, d_model = 16, d_ff = 0, context = 128;
  std::uint64_t seed = 1;
  float qk_gain = 1.0f;
  app.add_option("--out,-o", out_dir, "Output directory")->required();
  app.add_option("--layers", layers);
  app.add_option("--heads", heads);
  app.add_option("--d-model", d_model);
  app.add_option("--d-ff", d_ff, "Defaults to 4 * d-model");
  app.add_option("--context", context);
  app.add_option("--seed", seed);
  app.add_option("--qk-gain", qk_gain, "Scales q/k init; larger gives peakier attention");
  app.add_option("--words", words, "Space-separated vocabulary words");
  CLI11_PARSE(app, argc, argv);

  try {
    std::vector<std::string> tokens;
    std::istringstream ws(words);
    for (std::string w; ws >> w;) tokens.push_back(w);
    for (const char* extra : {".", ",", "!", "?", "=", "<|endoftext|>"}) tokens.emplace_back(extra);
    const attnmod::Tokenizer tok(attnmod::TokenizerMode::word, tokens, {});

    attnmod::ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.n_heads = heads;
    cfg.d_model = d_model;
    cfg.d_ff = d_ff ? d_ff : 4 * d_model;
    cfg.vocab_size = tok.vocab_size();
    cfg.max_context = context;
    attnmod::ToyModelOptions opt;
    opt.qk_gain = qk_gain;
    const auto model = attnmod::random_model(cfg, seed, opt);

    const std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    attnmod::save_weights(model, (dir / "model.bin").string());
    tok.save((dir / "vocab.json").string(), {});
    std::ofstream lex(dir / "lexicon.tsv");
    lex << "run\tran\truns\trunning\n"
        << "sit\tsat\tsits\tsitting\n"
        << "eat\tate\teats\teating\n";
    std::cout << "wrote " << dir.string() << " (" << tok.vocab_size() << " tokens, " << layers << " layers, " << heads
              << " heads)\n";
  } catch (const std::exception& e) {
    std::cerr << "amod-toy: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
