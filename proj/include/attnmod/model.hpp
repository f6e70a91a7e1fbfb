#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "attnmod/error.hpp"
#include "attnmod/tensor.hpp"

namespace attnmod {

struct ModelConfig {
  std::size_t n_layers = 1;
  std::size_t n_heads = 1;
  std::size_t d_model = 8;
  std::size_t d_ff = 32;
  std::size_t vocab_size = 16;
  std::size_t max_context = 64;
  float layer_norm_eps = 1e-5f;

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1 || max_context < 1) {
      throw ConfigError("model config counts must all be >= 1");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                        std::to_string(n_heads));
    }
    if (!(layer_norm_eps > 0.0f)) throw ConfigError("layer_norm_eps must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Projection matrices use the x * W convention: shape [in, out].
struct LayerWeights {
  std::vector<float> ln1_gain, ln1_shift;
  Matrix w_q, w_k, w_v;  // d x d
  std::vector<float> b_q, b_k, b_v;
  Matrix w_o;  // d x d
  std::vector<float> b_o;
  std::vector<float> ln2_gain, ln2_shift;
  Matrix w_fc;  // d x d_ff
  std::vector<float> b_fc;
  Matrix w_proj;  // d_ff x d
  std::vector<float> b_proj;

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct Weights {
  Matrix token_embedding;     // vocab x d
  Matrix position_embedding;  // max_context x d
  std::vector<LayerWeights> layers;
  std::vector<float> lnf_gain, lnf_shift;
  Matrix unembedding;  // vocab x d; logits = h * unembedding^T

  friend bool operator==(const Weights&, const Weights&) = default;
};

namespace detail {

inline void expect_shape(const Matrix& m, std::size_t r, std::size_t c, const std::string& name) {
  if (m.rows() != r || m.cols() != c) {
    throw DimensionError(name + " has shape " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                         ", expected " + std::to_string(r) + "x" + std::to_string(c));
  }
  if (!m.all_finite()) throw NumericError(name + " contains non-finite values");
}

inline void expect_len(const std::vector<float>& v, std::size_t n, const std::string& name) {
  if (v.size() != n) {
    throw DimensionError(name + " has length " + std::to_string(v.size()) + ", expected " + std::to_string(n));
  }
  for (float x : v) {
    if (!std::isfinite(x)) throw NumericError(name + " contains non-finite values");
  }
}

}  // namespace detail

struct Model {
  ModelConfig config;
  Weights weights;

  void validate() const {
    config.validate();
    const std::size_t d = config.d_model, f = config.d_ff;
    detail::expect_shape(weights.token_embedding, config.vocab_size, d, "token_embedding");
    detail::expect_shape(weights.position_embedding, config.max_context, d, "position_embedding");
    detail::expect_shape(weights.unembedding, config.vocab_size, d, "unembedding");
    detail::expect_len(weights.lnf_gain, d, "lnf_gain");
    detail::expect_len(weights.lnf_shift, d, "lnf_shift");
    if (weights.layers.size() != config.n_layers) {
      throw DimensionError("weights hold " + std::to_string(weights.layers.size()) + " layers, config says " +
                           std::to_string(config.n_layers));
    }
    for (std::size_t l = 0; l < weights.layers.size(); ++l) {
      const auto& lw = weights.layers[l];
      const std::string p = "layer " + std::to_string(l) + " ";
      detail::expect_len(lw.ln1_gain, d, p + "ln1_gain");
      detail::expect_len(lw.ln1_shift, d, p + "ln1_shift");
      detail::expect_shape(lw.w_q, d, d, p + "w_q");
      detail::expect_shape(lw.w_k, d, d, p + "w_k");
      detail::expect_shape(lw.w_v, d, d, p + "w_v");
      detail::expect_len(lw.b_q, d, p + "b_q");
      detail::expect_len(lw.b_k, d, p + "b_k");
      detail::expect_len(lw.b_v, d, p + "b_v");
      detail::expect_shape(lw.w_o, d, d, p + "w_o");
      detail::expect_len(lw.b_o, d, p + "b_o");
      detail::expect_len(lw.ln2_gain, d, p + "ln2_gain");
      detail::expect_len(lw.ln2_shift, d, p + "ln2_shift");
      detail::expect_shape(lw.w_fc, d, f, p + "w_fc");
      detail::expect_len(lw.b_fc, f, p + "b_fc");
      detail::expect_shape(lw.w_proj, f, d, p + "w_proj");
      detail::expect_len(lw.b_proj, d, p + "b_proj");
    }
  }
};

}  // namespace attnmod
