#pragma once

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "attnmod/attnmod.hpp"

namespace fixtures {

// Word-level vocabulary: the given words followed by ".", "=" and the
// end-of-text marker (in that order, unless already present).
inline attnmod::Tokenizer word_tokenizer(std::vector<std::string> words) {
  for (const char* extra : {".", "=", "<|endoftext|>"}) {
    if (std::find(words.begin(), words.end(), extra) == words.end()) words.emplace_back(extra);
  }
  return attnmod::Tokenizer(attnmod::TokenizerMode::word, std::move(words), {});
}

inline attnmod::ModelConfig config(std::size_t layers, std::size_t heads, std::size_t d, std::size_t vocab,
                                   std::size_t ctx = 64) {
  attnmod::ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d;
  c.d_ff = 4 * d;
  c.vocab_size = vocab;
  c.max_context = ctx;
  return c;
}

// Random small architecture for property tests.
inline attnmod::ModelConfig random_config(std::mt19937_64& rng, std::size_t vocab = 24, std::size_t ctx = 48) {
  std::uniform_int_distribution<std::size_t> layers(1, 4), heads(1, 4), width(1, 4);
  const std::size_t h = heads(rng);
  const std::size_t d = h * 4 * width(rng);  // <= 64
  return config(layers(rng), h, d, vocab, ctx);
}

inline std::vector<attnmod::TokenId> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(vocab) - 1);
  std::vector<attnmod::TokenId> t(n);
  for (auto& v : t) v = pick(rng);
  return t;
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("attnmod_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace fixtures
