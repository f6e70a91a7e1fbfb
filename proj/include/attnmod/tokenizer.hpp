#pragma once

// Byte-level BPE tokenizer compatible with GPT-2 style vocab/merges files,
// plus a word-level mode for toy vocabularies.
//
// Vocab file (JSON):
//   {
//     "mode": "byte_bpe" | "word",
//     "tokens": ["!", "\"", ...],              // index = token id
//     "special": {"end_of_text": "<|endoftext|>", "separator": "="},
//     "sentence_terminals": [".", "!", "?"]     // optional, "." always included
//   }
// Merges file: one "left right" pair per line, priority = line order. Blank
// lines and lines starting with "#version" are ignored.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attnmod/error.hpp"
#include "attnmod/types.hpp"

namespace attnmod {

enum class TokenizerMode { byte_bpe, word };

namespace detail {

inline void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

struct Utf8Unit {
  char32_t cp;
  std::size_t begin;
  std::size_t end;
};

// Lenient decoder: an invalid byte becomes a unit of its own.
inline std::vector<Utf8Unit> decode_utf8(std::string_view s) {
  std::vector<Utf8Unit> units;
  units.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    char32_t cp = b0;
    if (b0 >= 0xC0 && b0 < 0xE0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if (b0 >= 0xE0 && b0 < 0xF0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if (b0 >= 0xF0 && b0 < 0xF8) {
      len = 4;
      cp = b0 & 0x07;
    }
    bool ok = len == 1 ? b0 < 0x80 : i + len <= s.size();
    for (std::size_t k = 1; ok && k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b & 0xC0) != 0x80) {
        ok = false;
      } else {
        cp = (cp << 6) | (b & 0x3F);
      }
    }
    if (!ok) {
      units.push_back({0xDC00u + b0, i, i + 1});  // lone byte marker
      ++i;
      continue;
    }
    units.push_back({cp, i, i + len});
    i += len;
  }
  return units;
}

inline bool is_space_cp(char32_t c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f' || c == 0x85 ||
         c == 0xA0 || c == 0x1680 || (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 ||
         c == 0x202F || c == 0x205F || c == 0x3000;
}

inline bool is_digit_cp(char32_t c) { return c >= '0' && c <= '9'; }

// Approximates \p{L}: ASCII letters and non-ASCII code points outside the
// common punctuation/symbol blocks.
inline bool is_letter_cp(char32_t c) {
  if (c < 0x80) return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
  if (c >= 0xDC80 && c <= 0xDCFF) return false;  // lone bytes
  if (c < 0xC0) return c == 0xAA || c == 0xB5 || c == 0xBA;
  if (c == 0xD7 || c == 0xF7) return false;
  if (is_space_cp(c)) return false;
  if (c >= 0x2000 && c <= 0x2BFF) return false;
  if (c >= 0x3000 && c <= 0x303F) return false;
  if (c >= 0xFF00 && c <= 0xFF20) return false;
  return true;
}

// GPT-2 pre-tokenization:
//   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
inline std::vector<std::pair<std::size_t, std::size_t>> pretokenize(std::string_view text) {
  const auto units = decode_utf8(text);
  const std::size_t n = units.size();
  std::vector<std::pair<std::size_t, std::size_t>> pieces;  // unit ranges
  auto kind = [&](std::size_t k) {
    const char32_t c = units[k].cp;
    if (is_space_cp(c)) return 0;
    if (is_letter_cp(c)) return 1;
    if (is_digit_cp(c)) return 2;
    return 3;
  };
  std::size_t i = 0;
  while (i < n) {
    const char32_t c = units[i].cp;
    if (c == '\'' && i + 1 < n) {
      const char32_t c1 = units[i + 1].cp;
      if (c1 == 's' || c1 == 't' || c1 == 'm' || c1 == 'd') {
        pieces.emplace_back(i, i + 2);
        i += 2;
        continue;
      }
      if (i + 2 < n) {
        const char32_t c2 = units[i + 2].cp;
        if ((c1 == 'r' && c2 == 'e') || (c1 == 'v' && c2 == 'e') || (c1 == 'l' && c2 == 'l')) {
          pieces.emplace_back(i, i + 3);
          i += 3;
          continue;
        }
      }
    }
    std::size_t start = i;
    std::size_t j = i;
    if (c == ' ' && i + 1 < n && kind(i + 1) != 0) ++j;
    const int k = kind(j);
    if (k != 0) {
      while (j < n && kind(j) == k) ++j;
      pieces.emplace_back(start, j);
      i = j;
      continue;
    }
    while (j < n && kind(j) == 0) ++j;
    if (j == n || j - i == 1) {
      pieces.emplace_back(i, j);
      i = j;
    } else {
      pieces.emplace_back(i, j - 1);
      i = j - 1;
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> bytes;
  bytes.reserve(pieces.size());
  for (auto [a, b] : pieces) bytes.emplace_back(units[a].begin, units[b - 1].end);
  return bytes;
}

inline const std::array<char32_t, 256>& byte_encoder() {
  static const std::array<char32_t, 256> table = [] {
    std::array<char32_t, 256> t{};
    std::array<bool, 256> direct{};
    for (int b = '!'; b <= '~'; ++b) direct[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) direct[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) direct[b] = true;
    char32_t next = 256;
    for (int b = 0; b < 256; ++b) t[b] = direct[b] ? static_cast<char32_t>(b) : next++;
    return t;
  }();
  return table;
}

inline const std::unordered_map<char32_t, unsigned char>& byte_decoder() {
  static const std::unordered_map<char32_t, unsigned char> table = [] {
    std::unordered_map<char32_t, unsigned char> t;
    const auto& enc = byte_encoder();
    for (int b = 0; b < 256; ++b) t.emplace(enc[b], static_cast<unsigned char>(b));
    return t;
  }();
  return table;
}

inline std::string rtrim_ws(std::string_view s) {
  std::size_t e = s.size();
  while (e > 0 && (s[e - 1] == ' ' || s[e - 1] == '\n' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(0, e));
}

inline std::string trim_ws(std::string_view s) {
  std::size_t b = 0;
  while (b < s.size() && (s[b] == ' ' || s[b] == '\n' || s[b] == '\t' || s[b] == '\r')) ++b;
  return rtrim_ws(s.substr(b));
}

inline bool is_word_punct(char c) {
  return c == '.' || c == ',' || c == '!' || c == '?' || c == ';' || c == ':' || c == '=' ||
         c == '"' || c == '(' || c == ')';
}

}  // namespace detail

class Tokenizer {
 public:
  Tokenizer() = default;

  // Builds a tokenizer from in-memory tables. `merges` is ignored in word mode.
  Tokenizer(TokenizerMode mode, std::vector<std::string> tokens,
            std::vector<std::pair<std::string, std::string>> merges,
            std::string end_of_text = "<|endoftext|>", std::string separator = "=",
            std::vector<std::string> terminals = {".", "!", "?"})
      : mode_(mode),
        tokens_(std::move(tokens)),
        merges_(std::move(merges)),
        end_of_text_(std::move(end_of_text)),
        separator_(std::move(separator)),
        terminals_(std::move(terminals)) {
    if (std::find(terminals_.begin(), terminals_.end(), ".") == terminals_.end()) {
      terminals_.insert(terminals_.begin(), ".");
    }
    for (std::size_t id = 0; id < tokens_.size(); ++id) {
      if (!ids_.emplace(tokens_[id], static_cast<TokenId>(id)).second) {
        throw FormatError("duplicate vocabulary entry: " + tokens_[id]);
      }
    }
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto& [a, b] = merges_[r];
      if (mode_ == TokenizerMode::byte_bpe &&
          (!known_symbol(a) || !known_symbol(b) || !ids_.contains(a + b))) {
        throw FormatError("merge references unknown symbol: " + a + " " + b);
      }
      merge_rank_.emplace(a + " " + b, r);
    }
    if (auto it = ids_.find(end_of_text_); it != ids_.end()) eot_id_ = it->second;
    terminal_.resize(tokens_.size());
    for (std::size_t id = 0; id < tokens_.size(); ++id) {
      const std::string text = detail::rtrim_ws(decode_one(static_cast<TokenId>(id)));
      terminal_[id] = std::any_of(terminals_.begin(), terminals_.end(), [&](const std::string& t) {
        return text.size() >= t.size() && text.compare(text.size() - t.size(), t.size(), t) == 0;
      });
    }
  }

  static Tokenizer load(const std::string& vocab_path, const std::string& merges_path = {}) {
    std::ifstream vin(vocab_path);
    if (!vin) throw FormatError("cannot open vocab file: " + vocab_path);
    nlohmann::json j;
    try {
      vin >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed vocab file " + vocab_path + ": " + e.what());
    }
    const std::string mode_s = j.value("mode", "byte_bpe");
    TokenizerMode mode;
    if (mode_s == "byte_bpe") {
      mode = TokenizerMode::byte_bpe;
    } else if (mode_s == "word") {
      mode = TokenizerMode::word;
    } else {
      throw FormatError("unknown tokenizer mode: " + mode_s);
    }
    if (!j.contains("tokens") || !j["tokens"].is_array()) {
      throw FormatError("vocab file lacks a \"tokens\" array");
    }
    auto tokens = j["tokens"].get<std::vector<std::string>>();
    std::string eot = "<|endoftext|>";
    std::string sep = "=";
    if (j.contains("special")) {
      eot = j["special"].value("end_of_text", eot);
      sep = j["special"].value("separator", sep);
    }
    std::vector<std::string> terminals = {".", "!", "?"};
    if (j.contains("sentence_terminals")) {
      terminals = j["sentence_terminals"].get<std::vector<std::string>>();
    }
    std::vector<std::pair<std::string, std::string>> merges;
    if (!merges_path.empty()) {
      std::ifstream min(merges_path);
      if (!min) throw FormatError("cannot open merges file: " + merges_path);
      std::string line;
      std::size_t line_no = 0;
      while (std::getline(min, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.rfind("#version", 0) == 0) continue;
        const auto sp = line.find(' ');
        if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size()) {
          throw FormatError("malformed merge at line " + std::to_string(line_no));
        }
        merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
      }
    }
    return Tokenizer(mode, std::move(tokens), std::move(merges), eot, sep, terminals);
  }

  void save(const std::string& vocab_path, const std::string& merges_path) const {
    nlohmann::json j;
    j["mode"] = mode_ == TokenizerMode::byte_bpe ? "byte_bpe" : "word";
    j["tokens"] = tokens_;
    j["special"] = {{"end_of_text", end_of_text_}, {"separator", separator_}};
    j["sentence_terminals"] = terminals_;
    std::ofstream vout(vocab_path);
    if (!vout) throw FormatError("cannot write vocab file: " + vocab_path);
    vout << j.dump() << '\n';
    if (!merges_path.empty()) {
      std::ofstream mout(merges_path);
      if (!mout) throw FormatError("cannot write merges file: " + merges_path);
      mout << "#version: 0.2\n";
      for (const auto& [a, b] : merges_) mout << a << ' ' << b << '\n';
    }
  }

  TokenizerMode mode() const noexcept { return mode_; }
  std::size_t vocab_size() const noexcept { return tokens_.size(); }
  std::optional<TokenId> end_of_text() const noexcept { return eot_id_; }
  const std::string& separator() const noexcept { return separator_; }
  const std::string& token_string(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::optional<TokenId> find(const std::string& token) const {
    auto it = ids_.find(token);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  bool is_terminal(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < terminal_.size() && terminal_[id];
  }

  TokenSeq encode(std::string_view text) const {
    TokenSeq out;
    if (text.empty()) return out;
    // End-of-text markers are never split by BPE.
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t hit = eot_id_ ? text.find(end_of_text_, pos) : std::string_view::npos;
      const std::string_view chunk = text.substr(pos, hit == std::string_view::npos ? hit : hit - pos);
      if (mode_ == TokenizerMode::byte_bpe) {
        encode_bytes(chunk, out);
      } else {
        encode_words(chunk, out);
      }
      if (hit == std::string_view::npos) break;
      out.push_back(*eot_id_);
      pos = hit + end_of_text_.size();
    }
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    if (mode_ == TokenizerMode::word) {
      for (std::size_t k = 0; k < ids.size(); ++k) {
        const std::string& w = token_string(ids[k]);
        const bool attach = w.size() == 1 && w[0] != '=' && w[0] != '(' && w[0] != '"' &&
                            detail::is_word_punct(w[0]);
        if (k > 0 && !attach) out.push_back(' ');
        out += w;
      }
      return out;
    }
    for (TokenId id : ids) out += decode_one(id);
    return out;
  }

  std::string decode(const TokenSeq& ids) const { return decode(std::span<const TokenId>(ids)); }

  // Spans partition [0, n): each ends at a terminal token or the sequence end.
  std::vector<SentenceSpan> segment_sentences(std::span<const TokenId> tokens,
                                              SpanRole role = SpanRole::prompt) const {
    return segment_sentences(tokens, [this](TokenId t) { return is_terminal(t); }, role);
  }

  template <class IsTerminal>
  static std::vector<SentenceSpan> segment_sentences(std::span<const TokenId> tokens, IsTerminal&& is_term,
                                                     SpanRole role = SpanRole::prompt) {
    std::vector<SentenceSpan> spans;
    std::size_t start = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (is_term(tokens[i])) {
        spans.push_back({start, i, role, spans.size()});
        start = i + 1;
      }
    }
    if (start < tokens.size()) spans.push_back({start, tokens.size() - 1, role, spans.size()});
    return spans;
  }

  // True if the span decodes to the separator (e.g. the trailing "=").
  bool is_separator_span(std::span<const TokenId> tokens, const SentenceSpan& span) const {
    return detail::trim_ws(decode(tokens.subspan(span.start, span.size()))) == separator_;
  }

 private:
  bool known_symbol(const std::string& s) const {
    if (ids_.contains(s)) return true;
    for (const auto& u : detail::decode_utf8(s)) {
      if (!detail::byte_decoder().contains(u.cp)) return false;
    }
    return true;
  }

  std::string decode_one(TokenId id) const {
    const std::string& tok = token_string(id);
    if (mode_ == TokenizerMode::word) return tok;
    if (eot_id_ && id == *eot_id_) return tok;
    std::string out;
    const auto& dec = detail::byte_decoder();
    for (const auto& u : detail::decode_utf8(tok)) {
      if (auto it = dec.find(u.cp); it != dec.end()) {
        out.push_back(static_cast<char>(it->second));
      } else {
        out.append(tok, u.begin, u.end - u.begin);
      }
    }
    return out;
  }

  void encode_bytes(std::string_view text, TokenSeq& out) const {
    const auto& enc = detail::byte_encoder();
    for (auto [b, e] : detail::pretokenize(text)) {
      std::vector<std::string> symbols;
      symbols.reserve(e - b);
      for (std::size_t k = b; k < e; ++k) {
        std::string s;
        detail::append_utf8(s, enc[static_cast<unsigned char>(text[k])]);
        symbols.push_back(std::move(s));
      }
      apply_merges(symbols);
      for (const auto& sym : symbols) {
        if (auto it = ids_.find(sym); it != ids_.end()) {
          out.push_back(it->second);
          continue;
        }
        for (const auto& u : detail::decode_utf8(sym)) {
          auto it2 = ids_.find(sym.substr(u.begin, u.end - u.begin));
          if (it2 == ids_.end()) throw EncodingError("no byte-level vocabulary entry for symbol '" + sym + "'");
          out.push_back(it2->second);
        }
      }
    }
  }

  void apply_merges(std::vector<std::string>& symbols) const {
    if (merge_rank_.empty()) return;
    while (symbols.size() > 1) {
      std::size_t best_rank = SIZE_MAX;
      std::string best_key;
      for (std::size_t k = 0; k + 1 < symbols.size(); ++k) {
        std::string key = symbols[k] + " " + symbols[k + 1];
        if (auto it = merge_rank_.find(key); it != merge_rank_.end() && it->second < best_rank) {
          best_rank = it->second;
          best_key = std::move(key);
        }
      }
      if (best_rank == SIZE_MAX) break;
      const auto& [left, right] = merges_[best_rank];
      std::vector<std::string> merged;
      merged.reserve(symbols.size());
      for (std::size_t k = 0; k < symbols.size();) {
        if (k + 1 < symbols.size() && symbols[k] == left && symbols[k + 1] == right) {
          merged.push_back(left + right);
          k += 2;
        } else {
          merged.push_back(std::move(symbols[k]));
          ++k;
        }
      }
      symbols = std::move(merged);
    }
  }

  void encode_words(std::string_view text, TokenSeq& out) const {
    auto emit = [&](std::string_view w) {
      auto it = ids_.find(std::string(w));
      if (it == ids_.end()) throw EncodingError("no vocabulary entry for word '" + std::string(w) + "'");
      out.push_back(it->second);
    };
    std::size_t i = 0;
    while (i < text.size()) {
      const char c = text[i];
      if (c == ' ' || c == '\n' || c == '\t' || c == '\r') {
        ++i;
      } else if (detail::is_word_punct(c)) {
        emit(text.substr(i, 1));
        ++i;
      } else {
        std::size_t j = i;
        while (j < text.size() && text[j] != ' ' && text[j] != '\n' && text[j] != '\t' && text[j] != '\r' &&
               !detail::is_word_punct(text[j])) {
          ++j;
        }
        emit(text.substr(i, j - i));
        i = j;
      }
    }
  }

  TokenizerMode mode_ = TokenizerMode::byte_bpe;
  std::vector<std::string> tokens_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::string end_of_text_;
  std::string separator_;
  std::vector<std::string> terminals_;
  std::unordered_map<std::string, TokenId> ids_;
  std::unordered_map<std::string, std::size_t> merge_rank_;
  std::optional<TokenId> eot_id_;
  std::vector<bool> terminal_;
};

// A byte-level vocabulary: the 256 byte symbols in byte order, then the given
// merge products, then the end-of-text marker.
inline Tokenizer make_byte_tokenizer(const std::vector<std::pair<std::string, std::string>>& merges = {}) {
  std::vector<std::string> tokens;
  tokens.reserve(256 + merges.size() + 1);
  for (int b = 0; b < 256; ++b) {
    std::string s;
    detail::append_utf8(s, detail::byte_encoder()[b]);
    tokens.push_back(std::move(s));
  }
  for (const auto& [a, b] : merges) tokens.push_back(a + b);
  tokens.emplace_back("<|endoftext|>");
  return Tokenizer(TokenizerMode::byte_bpe, std::move(tokens), merges);
}

// Concept prompt of the form "run. team. field. drill. =": one concept per
// period-terminated span, with the trailing separator span set aside.
struct ConceptPrompt {
  std::vector<SentenceSpan> spans;     // full sentence spans, terminator included
  std::vector<SentenceSpan> concepts;  // token spans of the concept words only
  std::vector<std::string> texts;      // trimmed surface text per concept
  std::optional<SentenceSpan> separator;
};

inline ConceptPrompt parse_concept_prompt(const Tokenizer& tok, std::span<const TokenId> tokens) {
  ConceptPrompt cp;
  for (const auto& span : tok.segment_sentences(tokens)) {
    if (tok.is_separator_span(tokens, span)) {
      cp.separator = span;
      continue;
    }
    SentenceSpan concept_span = span;
    const std::string last = detail::trim_ws(tok.decode(tokens.subspan(span.end, 1)));
    if (span.size() > 1 && tok.is_terminal(tokens[span.end]) && last.size() == 1) --concept_span.end;
    std::string text = detail::trim_ws(tok.decode(tokens.subspan(concept_span.start, concept_span.size())));
    while (!text.empty() && (text.back() == '.' || text.back() == '!' || text.back() == '?')) text.pop_back();
    text = detail::trim_ws(text);
    if (text.empty()) continue;
    concept_span.ordinal = cp.concepts.size();
    cp.spans.push_back(span);
    cp.concepts.push_back(concept_span);
    cp.texts.push_back(std::move(text));
  }
  return cp;
}

inline std::string concept_prompt_text(const std::vector<std::string>& concepts) {
  std::string s;
  for (const auto& c : concepts) {
    if (!s.empty()) s += ' ';
    s += c;
    s += '.';
  }
  s += s.empty() ? "=" : " =";
  return s;
}

}  // namespace attnmod
