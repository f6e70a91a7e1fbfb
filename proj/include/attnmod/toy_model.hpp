#pragma once

// Random-weight models for tests, benchmarks and demos.

#include <cmath>
#include <cstdint>
#include <random>

#include "attnmod/model.hpp"

namespace attnmod {

struct ToyModelOptions {
  float embedding_std = 1.0f;
  // Multiplies the 1/sqrt(fan_in) init of q/k projections; larger values give
  // peakier attention.
  float qk_gain = 1.0f;
  float bias_std = 0.1f;
  bool tied_unembedding = true;
};

inline Model random_model(const ModelConfig& config, std::uint64_t seed, const ToyModelOptions& opt = {}) {
  config.validate();
  std::mt19937_64 rng(seed);
  auto normal = [&](float stddev) {
    std::normal_distribution<float> dist(0.0f, stddev);
    return dist(rng);
  };
  auto matrix = [&](std::size_t r, std::size_t c, float stddev) {
    Matrix m(r, c);
    for (float& v : m.data()) v = normal(stddev);
    return m;
  };
  auto vec = [&](std::size_t n, float mean, float stddev) {
    std::vector<float> v(n);
    for (float& x : v) x = mean + (stddev > 0 ? normal(stddev) : 0.0f);
    return v;
  };

  const std::size_t d = config.d_model, f = config.d_ff;
  const float d_std = 1.0f / std::sqrt(static_cast<float>(d));
  const float f_std = 1.0f / std::sqrt(static_cast<float>(f));

  Model m;
  m.config = config;
  auto& w = m.weights;
  w.token_embedding = matrix(config.vocab_size, d, opt.embedding_std);
  w.position_embedding = matrix(config.max_context, d, 0.5f * opt.embedding_std);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights lw;
    lw.ln1_gain = vec(d, 1.0f, 0.1f);
    lw.ln1_shift = vec(d, 0.0f, 0.1f);
    lw.w_q = matrix(d, d, d_std * opt.qk_gain);
    lw.w_k = matrix(d, d, d_std * opt.qk_gain);
    lw.w_v = matrix(d, d, d_std);
    lw.b_q = vec(d, 0.0f, opt.bias_std);
    lw.b_k = vec(d, 0.0f, opt.bias_std);
    lw.b_v = vec(d, 0.0f, opt.bias_std);
    lw.w_o = matrix(d, d, d_std);
    lw.b_o = vec(d, 0.0f, opt.bias_std);
    lw.ln2_gain = vec(d, 1.0f, 0.1f);
    lw.ln2_shift = vec(d, 0.0f, 0.1f);
    lw.w_fc = matrix(d, f, d_std);
    lw.b_fc = vec(f, 0.0f, opt.bias_std);
    lw.w_proj = matrix(f, d, f_std);
    lw.b_proj = vec(d, 0.0f, opt.bias_std);
    w.layers.push_back(std::move(lw));
  }
  w.lnf_gain = vec(d, 1.0f, 0.1f);
  w.lnf_shift = vec(d, 0.0f, 0.1f);
  w.unembedding = opt.tied_unembedding ? w.token_embedding : matrix(config.vocab_size, d, d_std);
  return m;
}

}  // namespace attnmod
