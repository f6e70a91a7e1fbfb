#pragma once

// Binary weight file, all integers and floats little-endian:
//
//   bytes  0..7    magic "ATTNMODW"
//   u32            format version (1)
//   u32 x 6        n_layers, n_heads, d_model, d_ff, vocab_size, max_context
//   f32            layer_norm_eps
//   u32            tensor count
//   directory      per tensor: u32 name length, name bytes, u32 ndim,
//                  u64 dims[ndim], u64 absolute payload offset
//   payloads       raw f32 data in directory order, each starting on a
//                  32-byte boundary, zero padding in between
//
// Tensor names follow the GPT-2 layout with the fused qkv projection split:
//   wte, wpe, h.{l}.ln_1.{weight,bias}, h.{l}.attn.{q,k,v}.{weight,bias},
//   h.{l}.attn.c_proj.{weight,bias}, h.{l}.ln_2.{weight,bias},
//   h.{l}.mlp.c_fc.{weight,bias}, h.{l}.mlp.c_proj.{weight,bias},
//   ln_f.{weight,bias}, lm_head.weight (omitted when tied to wte).
// Projection weights are stored [in, out].

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "attnmod/error.hpp"
#include "attnmod/model.hpp"

namespace attnmod {

inline constexpr std::string_view kWeightMagic = "ATTNMODW";
inline constexpr std::uint32_t kWeightFormatVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 32;

struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> data;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int k = 0; k < 4; ++k) bytes_.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int k = 0; k < 8; ++k) bytes_.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void pad_to(std::size_t alignment) {
    while (bytes_.size() % alignment != 0) bytes_.push_back('\0');
  }
  std::size_t size() const { return bytes_.size(); }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + k])) << (8 * k);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + k])) << (8 * k);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void seek(std::size_t pos) {
    if (pos > bytes_.size()) throw FormatError("weight file offset past end of file");
    pos_ = pos;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("weight file truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline TensorRecord tensor_of(std::string name, const Matrix& m) {
  return {std::move(name), {m.rows(), m.cols()}, m.storage()};
}

inline TensorRecord tensor_of(std::string name, const std::vector<float>& v) {
  return {std::move(name), {v.size()}, v};
}

}  // namespace detail

inline std::vector<TensorRecord> weight_tensors(const Model& model) {
  using detail::tensor_of;
  const auto& w = model.weights;
  std::vector<TensorRecord> out;
  out.push_back(tensor_of("wte", w.token_embedding));
  out.push_back(tensor_of("wpe", w.position_embedding));
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& lw = w.layers[l];
    const std::string p = "h." + std::to_string(l) + ".";
    out.push_back(tensor_of(p + "ln_1.weight", lw.ln1_gain));
    out.push_back(tensor_of(p + "ln_1.bias", lw.ln1_shift));
    out.push_back(tensor_of(p + "attn.q.weight", lw.w_q));
    out.push_back(tensor_of(p + "attn.q.bias", lw.b_q));
    out.push_back(tensor_of(p + "attn.k.weight", lw.w_k));
    out.push_back(tensor_of(p + "attn.k.bias", lw.b_k));
    out.push_back(tensor_of(p + "attn.v.weight", lw.w_v));
    out.push_back(tensor_of(p + "attn.v.bias", lw.b_v));
    out.push_back(tensor_of(p + "attn.c_proj.weight", lw.w_o));
    out.push_back(tensor_of(p + "attn.c_proj.bias", lw.b_o));
    out.push_back(tensor_of(p + "ln_2.weight", lw.ln2_gain));
    out.push_back(tensor_of(p + "ln_2.bias", lw.ln2_shift));
    out.push_back(tensor_of(p + "mlp.c_fc.weight", lw.w_fc));
    out.push_back(tensor_of(p + "mlp.c_fc.bias", lw.b_fc));
    out.push_back(tensor_of(p + "mlp.c_proj.weight", lw.w_proj));
    out.push_back(tensor_of(p + "mlp.c_proj.bias", lw.b_proj));
  }
  out.push_back(tensor_of("ln_f.weight", w.lnf_gain));
  out.push_back(tensor_of("ln_f.bias", w.lnf_shift));
  if (!(w.unembedding == w.token_embedding)) out.push_back(tensor_of("lm_head.weight", w.unembedding));
  return out;
}

inline std::string serialize_weights(const Model& model) {
  model.validate();
  const auto tensors = weight_tensors(model);
  const auto& c = model.config;

  // Directory size is known up front, so offsets can be computed in one pass.
  std::size_t header = kWeightMagic.size() + 4 + 6 * 4 + 4 + 4;
  for (const auto& t : tensors) header += 4 + t.name.size() + 4 + 8 * t.dims.size() + 8;
  std::vector<std::uint64_t> offsets;
  std::size_t cursor = header;
  for (const auto& t : tensors) {
    cursor = (cursor + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment;
    offsets.push_back(cursor);
    cursor += t.data.size() * 4;
  }

  detail::ByteWriter out;
  out.raw(kWeightMagic);
  out.u32(kWeightFormatVersion);
  for (std::size_t v : {c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_context}) {
    out.u32(static_cast<std::uint32_t>(v));
  }
  out.f32(c.layer_norm_eps);
  out.u32(static_cast<std::uint32_t>(tensors.size()));
  for (std::size_t k = 0; k < tensors.size(); ++k) {
    const auto& t = tensors[k];
    out.u32(static_cast<std::uint32_t>(t.name.size()));
    out.raw(t.name);
    out.u32(static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) out.u64(d);
    out.u64(offsets[k]);
  }
  for (const auto& t : tensors) {
    out.pad_to(kPayloadAlignment);
    for (float v : t.data) out.f32(v);
  }
  return out.bytes();
}

inline void save_weights(const Model& model, const std::string& path) {
  const std::string bytes = serialize_weights(model);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write weight file: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("short write to weight file: " + path);
}

inline Model deserialize_weights(std::string_view bytes) {
  detail::ByteReader in(bytes);
  if (in.raw(kWeightMagic.size()) != kWeightMagic) throw FormatError("bad weight file magic");
  const auto version = in.u32();
  if (version != kWeightFormatVersion) {
    throw FormatError("unsupported weight file version " + std::to_string(version));
  }
  Model model;
  auto& c = model.config;
  c.n_layers = in.u32();
  c.n_heads = in.u32();
  c.d_model = in.u32();
  c.d_ff = in.u32();
  c.vocab_size = in.u32();
  c.max_context = in.u32();
  c.layer_norm_eps = in.f32();
  c.validate();

  struct Entry {
    std::vector<std::uint64_t> dims;
    std::uint64_t offset;
  };
  std::map<std::string, Entry> dir;
  const auto count = in.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = in.u32();
    std::string name(in.raw(name_len));
    const auto ndim = in.u32();
    if (ndim < 1 || ndim > 2) throw FormatError("tensor " + name + " has unsupported rank " + std::to_string(ndim));
    Entry e;
    for (std::uint32_t d = 0; d < ndim; ++d) e.dims.push_back(in.u64());
    e.offset = in.u64();
    if (!dir.emplace(name, std::move(e)).second) throw FormatError("duplicate tensor " + name);
  }

  auto load = [&](const std::string& name) -> TensorRecord {
    auto it = dir.find(name);
    if (it == dir.end()) throw FormatError("weight file missing tensor " + name);
    std::uint64_t n = 1;
    for (auto d : it->second.dims) n *= d;
    in.seek(it->second.offset);
    TensorRecord t{name, it->second.dims, std::vector<float>(n)};
    for (auto& v : t.data) v = in.f32();
    return t;
  };
  auto matrix = [&](const std::string& name) {
    auto t = load(name);
    if (t.dims.size() != 2) throw FormatError("tensor " + name + " must be 2-D");
    return Matrix(t.dims[0], t.dims[1], std::move(t.data));
  };
  auto vec = [&](const std::string& name) {
    auto t = load(name);
    if (t.dims.size() != 1) throw FormatError("tensor " + name + " must be 1-D");
    return std::move(t.data);
  };

  auto& w = model.weights;
  w.token_embedding = matrix("wte");
  w.position_embedding = matrix("wpe");
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    LayerWeights lw;
    lw.ln1_gain = vec(p + "ln_1.weight");
    lw.ln1_shift = vec(p + "ln_1.bias");
    lw.w_q = matrix(p + "attn.q.weight");
    lw.b_q = vec(p + "attn.q.bias");
    lw.w_k = matrix(p + "attn.k.weight");
    lw.b_k = vec(p + "attn.k.bias");
    lw.w_v = matrix(p + "attn.v.weight");
    lw.b_v = vec(p + "attn.v.bias");
    lw.w_o = matrix(p + "attn.c_proj.weight");
    lw.b_o = vec(p + "attn.c_proj.bias");
    lw.ln2_gain = vec(p + "ln_2.weight");
    lw.ln2_shift = vec(p + "ln_2.bias");
    lw.w_fc = matrix(p + "mlp.c_fc.weight");
    lw.b_fc = vec(p + "mlp.c_fc.bias");
    lw.w_proj = matrix(p + "mlp.c_proj.weight");
    lw.b_proj = vec(p + "mlp.c_proj.bias");
    w.layers.push_back(std::move(lw));
  }
  w.lnf_gain = vec("ln_f.weight");
  w.lnf_shift = vec("ln_f.bias");
  w.unembedding = dir.contains("lm_head.weight") ? matrix("lm_head.weight") : w.token_embedding;
  model.validate();
  return model;
}

inline Model load_weights(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open weight file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_weights(bytes);
}

}  // namespace attnmod
