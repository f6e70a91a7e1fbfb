#pragma once

// Concept matching for coverage: a concept counts as present when one of its
// surface forms appears as a whole word (or whole word sequence) in the text.
// Surface forms come from an explicit lexicon plus a light suffix-stripping
// stemmer for regular inflections.
//
// Lexicon file: one line per lemma, tab-separated; the first field is the
// lemma, the rest are its surface forms. Blank lines and '#' comments are
// skipped.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "attnmod/error.hpp"

namespace attnmod {

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Lowercased alphanumeric runs; everything else is a boundary.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    const auto uc = static_cast<unsigned char>(c);
    if (std::isalnum(uc) || uc >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(uc)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

namespace detail {

inline bool is_vowel(char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u'; }

inline bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

// Adds `stem` plus its undoubled / e-restored variants.
inline void add_stem_variants(std::set<std::string>& out, const std::string& stem) {
  if (stem.size() < 2) return;
  out.insert(stem);
  out.insert(stem + "e");
  const std::size_t n = stem.size();
  if (n >= 3 && stem[n - 1] == stem[n - 2] && !is_vowel(stem[n - 1])) out.insert(stem.substr(0, n - 1));
}

}  // namespace detail

// Candidate lemmas of an inflected word: s/es/ies, ed/d/ied, ing with
// consonant-doubling and silent-e rules. Over-generation is intended; the
// candidates are only ever compared against known lemmas.
inline std::set<std::string> stem_candidates(const std::string& word) {
  using detail::ends_with;
  std::set<std::string> out{word};
  const std::size_t n = word.size();
  if (ends_with(word, "ies") && n > 4) out.insert(word.substr(0, n - 3) + "y");
  if (ends_with(word, "es") && n > 3) out.insert(word.substr(0, n - 2));
  if (ends_with(word, "s") && !ends_with(word, "ss") && n > 2) out.insert(word.substr(0, n - 1));
  if (ends_with(word, "ied") && n > 4) out.insert(word.substr(0, n - 3) + "y");
  if (ends_with(word, "ed") && n > 3) {
    detail::add_stem_variants(out, word.substr(0, n - 2));
    out.insert(word.substr(0, n - 1));
  }
  if (ends_with(word, "ing") && n > 4) detail::add_stem_variants(out, word.substr(0, n - 3));
  return out;
}

class InflectionLexicon {
 public:
  InflectionLexicon() = default;
  explicit InflectionLexicon(bool use_stemmer) : use_stemmer_(use_stemmer) {}

  static InflectionLexicon load(const std::string& path, bool use_stemmer = true) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open lexicon file: " + path);
    InflectionLexicon lex(use_stemmer);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      std::vector<std::string> fields;
      std::size_t start = 0;
      while (true) {
        const auto tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
      }
      if (fields[0].empty()) continue;
      lex.add(fields[0], std::vector<std::string>(fields.begin() + 1, fields.end()));
    }
    return lex;
  }

  void add(const std::string& lemma, const std::vector<std::string>& forms) {
    auto& set = forms_[to_lower(lemma)];
    set.insert(to_lower(lemma));
    for (const auto& f : forms) {
      if (!f.empty()) set.insert(to_lower(f));
    }
  }

  bool use_stemmer() const noexcept { return use_stemmer_; }
  std::size_t size() const noexcept { return forms_.size(); }

  // Surface forms of a lemma; always contains the lemma itself.
  std::set<std::string> forms(const std::string& lemma) const {
    const std::string key = to_lower(lemma);
    if (auto it = forms_.find(key); it != forms_.end()) return it->second;
    return {key};
  }

  bool word_matches(const std::string& lemma_word, const std::string& word) const {
    if (word == lemma_word) return true;
    if (auto it = forms_.find(lemma_word); it != forms_.end() && it->second.contains(word)) return true;
    return use_stemmer_ && stem_candidates(word).contains(lemma_word);
  }

  // Whole-word match of a (possibly multi-word) concept inside `words`.
  bool covers(const std::string& concept_text, const std::vector<std::string>& words) const {
    const auto cwords = split_words(concept_text);
    if (cwords.empty() || cwords.size() > words.size()) return false;
    // A multi-word lexicon entry may also list multi-word forms.
    if (auto it = forms_.find(to_lower(concept_text)); it != forms_.end()) {
      for (const auto& form : it->second) {
        const auto fw = split_words(form);
        if (fw.size() > 1 && std::search(words.begin(), words.end(), fw.begin(), fw.end()) != words.end()) {
          return true;
        }
      }
    }
    for (std::size_t s = 0; s + cwords.size() <= words.size(); ++s) {
      bool all = true;
      for (std::size_t k = 0; k < cwords.size() && all; ++k) all = word_matches(cwords[k], words[s + k]);
      if (all) return true;
    }
    return false;
  }

  bool covers(const std::string& concept_text, std::string_view text) const {
    return covers(concept_text, split_words(text));
  }

 private:
  bool use_stemmer_ = true;
  std::map<std::string, std::set<std::string>> forms_;
};

}  // namespace attnmod
