#pragma once

// Building blocks of the `amod` command-line tool: flat config files, corpus
// ingestion, the worker pool, record (de)serialization and the four verbs.
// The executable in tools/ only parses arguments and maps errors to exit
// codes.
//
// Config file: one `key = value` per line, `#` comments, optional quotes.
// `[section]` headers prefix the following keys with "section.".

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "attnmod/decoder.hpp"
#include "attnmod/error.hpp"
#include "attnmod/lexicon.hpp"
#include "attnmod/metrics.hpp"
#include "attnmod/model.hpp"
#include "attnmod/modulation.hpp"
#include "attnmod/sentence_attention.hpp"
#include "attnmod/tokenizer.hpp"
#include "attnmod/weights_io.hpp"

namespace attnmod::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2 };

inline constexpr const char* kModelDirEnv = "AMOD_MODEL_DIR";

// ---------------------------------------------------------------- config

struct KeyValues {
  std::map<std::string, std::string> values;
  std::map<std::string, std::size_t> lines;
};

inline KeyValues parse_flat_config(std::istream& in, const std::string& source = "config") {
  KeyValues kv;
  std::string line, section;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    throw ConfigError(source + ":" + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    // Strip a trailing comment that is not inside quotes.
    bool quoted = false;
    for (std::size_t k = 0; k < line.size(); ++k) {
      if (line[k] == '"' && (k == 0 || line[k - 1] != '\\')) quoted = !quoted;
      if (line[k] == '#' && !quoted) {
        line.resize(k);
        break;
      }
    }
    const std::string t = attnmod::detail::trim_ws(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) fail("malformed section header");
      section = attnmod::detail::trim_ws(t.substr(1, t.size() - 2)) + ".";
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) fail("expected key = value");
    const std::string key = section + attnmod::detail::trim_ws(t.substr(0, eq));
    std::string value = attnmod::detail::trim_ws(t.substr(eq + 1));
    if (key.empty() || key == section) fail("empty key");
    if (!value.empty() && value.front() == '"') {
      if (value.size() < 2 || value.back() != '"') fail("unterminated string for " + key);
      std::string unq;
      for (std::size_t k = 1; k + 1 < value.size(); ++k) {
        if (value[k] == '\\' && k + 2 < value.size()) ++k;
        unq.push_back(value[k]);
      }
      value = std::move(unq);
    }
    if (kv.values.contains(key)) fail("duplicate key " + key);
    kv.values[key] = value;
    kv.lines[key] = line_no;
  }
  return kv;
}

inline KeyValues load_flat_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  return parse_flat_config(in, path);
}

enum class TracePolicy { none, modulated, all };

inline TracePolicy parse_trace_policy(std::string_view s) {
  if (s == "none") return TracePolicy::none;
  if (s == "modulated") return TracePolicy::modulated;
  if (s == "all") return TracePolicy::all;
  throw ConfigError("unknown trace policy '" + std::string(s) + "' (expected none, modulated or all)");
}

inline std::string_view to_string(TracePolicy p) {
  switch (p) {
    case TracePolicy::none: return "none";
    case TracePolicy::modulated: return "modulated";
    case TracePolicy::all: return "all";
  }
  return "none";
}

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long n = 0;
  try {
    n = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v.front() == '-') {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return static_cast<std::size_t>(n);
}

inline float parse_float(const std::string& key, const std::string& v) {
  const std::string lower = to_lower(v);
  if (lower == "inf" || lower == "infinity" || lower == "+inf") return std::numeric_limits<float>::infinity();
  std::size_t pos = 0;
  float f = 0.0f;
  try {
    f = std::stof(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return f;
}

}  // namespace detail

struct RunConfig {
  std::string model_path;
  std::string vocab_path;
  std::string merges_path;
  std::string lexicon_path;
  std::string corpus_path;
  std::string output_dir = ".";
  TaskMode task = TaskMode::narrative;
  ModulationConfig modulation;
  bool layers_explicit = false;
  DecodeStrategy decoder = DecodeStrategy::greedy;
  std::size_t beam = 1;
  std::size_t max_new_tokens = 32;
  std::size_t max_sentences = 0;  // 0 = no sentence limit
  BeamScoring scoring = BeamScoring::length_normalized;
  bool stop_at_eos = true;
  TracePolicy trace = TracePolicy::none;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t narrative_sentences = 5;  // 0 = any count
  std::size_t permutation_cap = kDefaultPermutationCap;
  bool stemmer = true;

  // Relative paths in a config file resolve against `base_dir`.
  void apply(const KeyValues& kv, const fs::path& base_dir = {}) {
    auto path_of = [&](const std::string& v) {
      if (v.empty()) return v;
      const fs::path p(v);
      return (p.is_relative() && !base_dir.empty() ? base_dir / p : p).string();
    };
    for (const auto& [key, v] : kv.values) {
      if (key == "model") {
        model_path = path_of(v);
      } else if (key == "vocab") {
        vocab_path = path_of(v);
      } else if (key == "merges") {
        merges_path = path_of(v);
      } else if (key == "lexicon") {
        lexicon_path = path_of(v);
      } else if (key == "corpus") {
        corpus_path = path_of(v);
      } else if (key == "output") {
        output_dir = path_of(v);
      } else if (key == "task") {
        task = parse_task_mode(v);
      } else if (key == "strategy") {
        modulation.strategy = parse_strategy(v);
      } else if (key == "layer_start") {
        modulation.layer_start = detail::parse_count(key, v);
        layers_explicit = true;
      } else if (key == "layer_end") {
        modulation.layer_end = detail::parse_count(key, v);
        layers_explicit = true;
      } else if (key == "scale") {
        modulation.scale = detail::parse_float(key, v);
      } else if (key == "clip") {
        modulation.clip = detail::parse_float(key, v);
      } else if (key == "decoder") {
        if (v == "greedy") {
          decoder = DecodeStrategy::greedy;
        } else if (v == "beam") {
          decoder = DecodeStrategy::beam;
        } else {
          throw ConfigError("decoder: expected greedy or beam, got '" + v + "'");
        }
      } else if (key == "beam") {
        beam = detail::parse_count(key, v);
      } else if (key == "max_new_tokens") {
        max_new_tokens = detail::parse_count(key, v);
      } else if (key == "max_sentences") {
        max_sentences = detail::parse_count(key, v);
      } else if (key == "scoring") {
        if (v == "normalized") {
          scoring = BeamScoring::length_normalized;
        } else if (v == "raw") {
          scoring = BeamScoring::raw;
        } else {
          throw ConfigError("scoring: expected normalized or raw, got '" + v + "'");
        }
      } else if (key == "stop_at_eos") {
        stop_at_eos = detail::parse_bool(key, v);
      } else if (key == "trace") {
        trace = parse_trace_policy(v);
      } else if (key == "seed") {
        seed = detail::parse_count(key, v);
      } else if (key == "workers") {
        workers = detail::parse_count(key, v);
      } else if (key == "narrative_sentences") {
        narrative_sentences = detail::parse_count(key, v);
      } else if (key == "permutation_cap") {
        permutation_cap = detail::parse_count(key, v);
      } else if (key == "stemmer") {
        stemmer = detail::parse_bool(key, v);
      } else {
        const auto line = kv.lines.contains(key) ? " (line " + std::to_string(kv.lines.at(key)) + ")" : "";
        throw ConfigError("unknown config key '" + key + "'" + line);
      }
    }
  }

  void validate() const {
    if (beam < 1) throw ConfigError("beam must be >= 1");
    if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (!(modulation.scale >= 0.0f) || !std::isfinite(modulation.scale)) {
      throw ConfigError("scale must be finite and >= 0");
    }
    if (!(modulation.clip > 0.0f)) throw ConfigError("clip must be positive");
    if (modulation.strategy == Strategy::coverage && task != TaskMode::constrained) {
      throw ConfigError("strategy coverage needs task = constrained");
    }
  }
};

// Fills unset model/tokenizer paths from a model directory: `model_path`
// itself when it names a directory, else $AMOD_MODEL_DIR.
inline void resolve_model_paths(RunConfig& cfg) {
  fs::path dir;
  if (!cfg.model_path.empty() && fs::is_directory(cfg.model_path)) {
    dir = cfg.model_path;
    cfg.model_path = (dir / "model.bin").string();
  } else if (cfg.model_path.empty()) {
    const char* env = std::getenv(kModelDirEnv);
    if (env == nullptr || *env == '\0') {
      throw ConfigError(std::string("no model given: pass --model or set ") + kModelDirEnv);
    }
    dir = env;
    cfg.model_path = (dir / "model.bin").string();
  } else {
    dir = fs::path(cfg.model_path).parent_path();
  }
  if (cfg.vocab_path.empty()) cfg.vocab_path = (dir / "vocab.json").string();
  if (cfg.merges_path.empty() && fs::exists(dir / "merges.txt")) cfg.merges_path = (dir / "merges.txt").string();
}

// ---------------------------------------------------------------- logging

class Log {
 public:
  explicit Log(std::ostream& out) : out_(out) {}
  void warn(const std::string& msg) {
    std::lock_guard lock(mu_);
    out_ << "amod: warning: " << msg << '\n';
  }
  void note(const std::string& msg) {
    std::lock_guard lock(mu_);
    out_ << "amod: " << msg << '\n';
  }

 private:
  std::ostream& out_;
  std::mutex mu_;
};

// ---------------------------------------------------------------- pool

// Calls f(i) for i in [0, n) on `workers` threads. Exceptions are kept per
// index and returned; callers decide what a failed item means.
template <class F>
std::vector<std::exception_ptr> parallel_for(std::size_t n, std::size_t workers, F&& f) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto body = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t k = std::max<std::size_t>(1, std::min(workers, n));
  if (k == 1) {
    body();
    return errors;
  }
  std::vector<std::thread> threads;
  threads.reserve(k);
  for (std::size_t t = 0; t < k; ++t) threads.emplace_back(body);
  for (auto& t : threads) t.join();
  return errors;
}

// Configuration problems apply to every item; they abort the run.
inline void rethrow_if_config(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const ConfigError&) {
    throw;
  } catch (...) {
  }
}

inline std::string describe(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const std::exception& ex) {
    return ex.what();
  } catch (...) {
    return "unknown error";
  }
}

// ---------------------------------------------------------------- corpus

struct CorpusItem {
  std::size_t line = 0;
  json id;  // copied through when present
  std::string prompt;
  std::vector<std::string> concepts;
  std::string o1, o2;
};

inline std::optional<CorpusItem> parse_corpus_line(const std::string& text, std::size_t line_no, TaskMode task,
                                                   std::string& why) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception&) {
    why = "not valid JSON";
    return std::nullopt;
  }
  if (!j.is_object()) {
    why = "expected a JSON object";
    return std::nullopt;
  }
  CorpusItem item;
  item.line = line_no;
  if (j.contains("id")) item.id = j["id"];
  auto str = [&](const char* key, std::string& out) {
    if (!j.contains(key)) return false;
    if (!j[key].is_string()) throw FormatError(std::string("field \"") + key + "\" must be a string");
    out = j[key].get<std::string>();
    return true;
  };
  try {
    switch (task) {
      case TaskMode::narrative:
        if (!str("prompt", item.prompt)) {
          why = "missing \"prompt\"";
          return std::nullopt;
        }
        break;
      case TaskMode::abductive:
        if (!str("o1", item.o1) || !str("o2", item.o2)) {
          why = "missing \"o1\" or \"o2\"";
          return std::nullopt;
        }
        break;
      case TaskMode::constrained:
        if (j.contains("concepts")) {
          if (!j["concepts"].is_array()) throw FormatError("field \"concepts\" must be an array");
          for (const auto& c : j["concepts"]) {
            if (!c.is_string()) throw FormatError("concepts must be strings");
            item.concepts.push_back(c.get<std::string>());
          }
        } else if (!str("prompt", item.prompt)) {
          why = "missing \"concepts\" or \"prompt\"";
          return std::nullopt;
        }
        break;
    }
  } catch (const FormatError& e) {
    why = e.what();
    return std::nullopt;
  }
  return item;
}

// Malformed lines are skipped and logged with their line number.
inline std::vector<CorpusItem> read_corpus(const std::string& path, TaskMode task, Log& log) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open corpus file: " + path);
  std::vector<CorpusItem> items;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (attnmod::detail::trim_ws(line).empty()) continue;
    std::string why;
    if (auto item = parse_corpus_line(line, line_no, task, why)) {
      items.push_back(std::move(*item));
    } else {
      log.warn(path + ":" + std::to_string(line_no) + ": skipped: " + why);
    }
  }
  return items;
}

struct PreparedPrompt {
  std::string text;
  TokenSeq tokens;
  std::vector<SentenceSpan> sentences;
  ConceptPrompt concepts;  // constrained task only
};

inline PreparedPrompt prepare_prompt(const CorpusItem& item, TaskMode task, const Tokenizer& tok,
                                     std::size_t narrative_sentences) {
  PreparedPrompt p;
  switch (task) {
    case TaskMode::narrative:
      p.text = item.prompt;
      break;
    case TaskMode::abductive:
      p.text = attnmod::detail::trim_ws(item.o1) + " " + attnmod::detail::trim_ws(item.o2);
      break;
    case TaskMode::constrained:
      p.text = item.concepts.empty() ? item.prompt : concept_prompt_text(item.concepts);
      break;
  }
  p.tokens = tok.encode(p.text);
  if (p.tokens.empty()) throw FormatError("empty prompt");
  p.sentences = tok.segment_sentences(p.tokens);
  if (task == TaskMode::narrative && narrative_sentences != 0 && p.sentences.size() != narrative_sentences) {
    throw FormatError("narrative prompt has " + std::to_string(p.sentences.size()) + " sentences, expected " +
                      std::to_string(narrative_sentences));
  }
  if (task == TaskMode::abductive) {
    const auto n1 = tok.segment_sentences(tok.encode(attnmod::detail::trim_ws(item.o1))).size();
    if (n1 != 1 || p.sentences.size() != 2) {
      throw FormatError("abductive observations must be one sentence each");
    }
  }
  if (task == TaskMode::constrained) {
    p.concepts = parse_concept_prompt(tok, p.tokens);
    if (p.concepts.concepts.empty()) throw FormatError("no concepts in prompt");
    p.sentences = p.concepts.spans;
  }
  return p;
}

// ---------------------------------------------------------------- runtime

struct Runtime {
  RunConfig config;
  Model model;
  Tokenizer tokenizer;
  std::shared_ptr<const InflectionLexicon> lexicon;
  ModulationConfig modulation;  // effective, after task defaults
};

inline ModulationConfig effective_modulation(const RunConfig& cfg, std::size_t n_layers, Log& log) {
  ModulationConfig m = cfg.modulation;
  if (m.strategy == Strategy::none || cfg.layers_explicit) return m;
  const auto d = task_default_layers(cfg.task);
  if (d.end <= n_layers) {
    m.layer_start = d.start;
    m.layer_end = d.end;
  } else {
    m.layer_start = 0;
    m.layer_end = n_layers;
    log.note("task default layers [" + std::to_string(d.start) + ", " + std::to_string(d.end) + ") do not fit a " +
             std::to_string(n_layers) + "-layer model; modulating all layers");
  }
  return m;
}

inline std::shared_ptr<const InflectionLexicon> load_lexicon(const RunConfig& cfg) {
  if (cfg.lexicon_path.empty()) return std::make_shared<const InflectionLexicon>(cfg.stemmer);
  return std::make_shared<const InflectionLexicon>(InflectionLexicon::load(cfg.lexicon_path, cfg.stemmer));
}

inline Runtime load_runtime(RunConfig cfg, Log& log) {
  cfg.validate();
  resolve_model_paths(cfg);
  Runtime rt;
  rt.model = load_weights(cfg.model_path);
  rt.tokenizer = Tokenizer::load(cfg.vocab_path, cfg.merges_path);
  if (rt.tokenizer.vocab_size() != rt.model.config.vocab_size) {
    throw FormatError("tokenizer has " + std::to_string(rt.tokenizer.vocab_size()) + " tokens but the model expects " +
                      std::to_string(rt.model.config.vocab_size));
  }
  rt.lexicon = load_lexicon(cfg);
  rt.modulation = effective_modulation(cfg, rt.model.config.n_layers, log);
  rt.modulation.validate(rt.model.config.n_layers);
  rt.config = std::move(cfg);
  return rt;
}

inline DecodeConfig decode_config(const Runtime& rt) {
  DecodeConfig d;
  d.strategy = rt.config.decoder == DecodeStrategy::beam || rt.config.beam > 1 ? DecodeStrategy::beam
                                                                                : DecodeStrategy::greedy;
  d.beam_width = rt.config.beam;
  d.max_new_tokens = rt.config.max_new_tokens;
  if (rt.config.stop_at_eos) d.eos = rt.tokenizer.end_of_text();
  if (rt.config.max_sentences > 0) d.max_sentences = rt.config.max_sentences;
  d.scoring = rt.config.scoring;
  const Tokenizer* tok = &rt.tokenizer;
  d.is_terminal = [tok](TokenId t) { return tok->is_terminal(t); };
  return d;
}

inline TraceRequest trace_request(const Runtime& rt) {
  switch (rt.config.trace) {
    case TracePolicy::none: return TraceRequest::none();
    case TracePolicy::all: return TraceRequest::all();
    case TracePolicy::modulated:
      if (rt.modulation.strategy == Strategy::none) return TraceRequest::all();
      return TraceRequest::layer_range(rt.model.config.n_layers, rt.modulation.layer_start, rt.modulation.layer_end);
  }
  return TraceRequest::none();
}

inline Modulator make_modulator(const Runtime& rt, const PreparedPrompt& p, std::vector<float> order_weights = {}) {
  const Tokenizer* tok = &rt.tokenizer;
  switch (rt.modulation.strategy) {
    case Strategy::none: return Modulator{};
    case Strategy::balanced_context:
      return Modulator::balanced(rt.modulation, p.tokens.size(), p.sentences,
                                 [tok](TokenId t) { return tok->is_terminal(t); });
    case Strategy::coverage:
      return Modulator::coverage(rt.modulation, p.concepts.concepts, p.concepts.texts, std::move(order_weights),
                                 rt.lexicon, [tok](std::span<const TokenId> ids) { return tok->decode(ids); });
  }
  return Modulator{};
}

inline GenerationRecord generate_one(const Runtime& rt, const PreparedPrompt& p, std::vector<float> order_weights = {}) {
  return decode(rt.model, p.tokens, make_modulator(rt, p, std::move(order_weights)), decode_config(rt),
                trace_request(rt));
}

// ---------------------------------------------------------------- records

namespace detail {

inline json spans_json(const std::vector<SentenceSpan>& spans) {
  json a = json::array();
  for (const auto& s : spans) a.push_back({s.start, s.end});
  return a;
}

inline std::vector<SentenceSpan> spans_from(const json& a, SpanRole role) {
  std::vector<SentenceSpan> out;
  for (const auto& s : a) {
    if (!s.is_array() || s.size() != 2) throw FormatError("sentence span must be [start, end]");
    const auto b = s[0].get<std::size_t>(), e = s[1].get<std::size_t>();
    if (b > e) throw FormatError("sentence span with start > end");
    out.push_back({b, e, role, out.size()});
  }
  return out;
}

inline json trace_json(const AttentionTrace& t) {
  json slots = json::array();
  for (std::size_t l = 0; l < t.n_layers(); ++l) {
    for (std::size_t h = 0; h < t.n_heads(); ++h) {
      if (!t.has(l, h)) continue;
      json band = json::array();
      for (std::size_t i = t.first_position(); i < t.end_position(); ++i) {
        for (float v : t.row(l, h, i)) band.push_back(v);
      }
      slots.push_back({{"layer", l}, {"head", h}, {"band", std::move(band)}});
    }
  }
  return {{"n_layers", t.n_layers()},
          {"n_heads", t.n_heads()},
          {"first", t.first_position()},
          {"end", t.end_position()},
          {"slots", std::move(slots)}};
}

inline AttentionTrace trace_from(const json& j) {
  const auto L = j.at("n_layers").get<std::size_t>(), H = j.at("n_heads").get<std::size_t>();
  const auto first = j.at("first").get<std::size_t>(), end = j.at("end").get<std::size_t>();
  std::vector<std::vector<bool>> wanted(L, std::vector<bool>(H, false));
  for (const auto& s : j.at("slots")) wanted.at(s.at("layer").get<std::size_t>()).at(s.at("head").get<std::size_t>()) = true;
  // A TraceRequest is a layer mask times a head mask; saved traces always
  // have that shape, anything else is rejected.
  TraceRequest req{true, std::vector<bool>(L, false), std::vector<bool>(H, false)};
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < H; ++h) {
      req.layers[l] = req.layers[l] || wanted[l][h];
      req.heads[h] = req.heads[h] || wanted[l][h];
    }
  }
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < H; ++h) {
      if (req.wants(l, h) != wanted[l][h]) throw FormatError("trace slots are not a layer x head product");
    }
  }
  AttentionTrace t(L, H, req, first, end);
  for (const auto& s : j.at("slots")) {
    const auto l = s.at("layer").get<std::size_t>(), h = s.at("head").get<std::size_t>();
    const auto& band = s.at("band");
    std::size_t k = 0;
    for (std::size_t i = first; i < end; ++i) {
      auto row = t.mutable_row(l, h, i);
      for (float& v : row) {
        if (k >= band.size()) throw FormatError("trace band too short");
        v = band[k++].get<float>();
      }
    }
    if (k != band.size()) throw FormatError("trace band too long");
  }
  return t;
}

}  // namespace detail

inline json record_json(const Runtime& rt, const CorpusItem& item, const PreparedPrompt& p,
                        const GenerationRecord& r) {
  const auto& tok = rt.tokenizer;
  json j;
  j["line"] = item.line;
  if (!item.id.is_null()) j["id"] = item.id;
  j["task"] = std::string(to_string(rt.config.task));
  j["strategy"] = std::string(to_string(r.strategy));
  j["prompt"] = p.text;
  j["prompt_tokens"] = p.tokens;
  j["prompt_sentences"] = detail::spans_json(p.sentences);
  if (rt.config.task == TaskMode::constrained) {
    j["concepts"] = p.concepts.texts;
    j["concept_spans"] = detail::spans_json(p.concepts.concepts);
  }
  j["generated_tokens"] = r.generated;
  j["generated_text"] = tok.decode(r.generated);
  j["generated_sentences"] = detail::spans_json(r.generated_sentences);
  json texts = json::array();
  for (const auto& s : r.generated_sentences) {
    const auto rel = std::span<const TokenId>(r.generated).subspan(s.start - r.prompt.size(), s.size());
    texts.push_back(tok.decode(rel));
  }
  j["sentence_texts"] = std::move(texts);
  j["score"] = r.score;
  j["normalized_score"] = r.normalized_score();
  j["scored_tokens"] = r.scored_tokens;
  j["hit_eos"] = r.hit_eos;
  j["truncated"] = r.truncated;
  if (!r.covered.empty()) {
    std::vector<int> flags(r.covered.begin(), r.covered.end());
    j["covered"] = flags;
  }
  if (!r.order_weights.empty()) j["order_weights"] = r.order_weights;
  if (!r.trace.empty()) j["trace"] = detail::trace_json(r.trace);
  return j;
}

// A generation record read back for analysis or evaluation.
struct LoadedRecord {
  std::size_t line = 0;  // line in the generations file
  EvalRecord eval;
  AnalysisRecord analysis;
  std::vector<SentenceSpan> concept_spans;
  bool has_trace = false;
};

inline LoadedRecord parse_record(const json& j) {
  LoadedRecord r;
  auto& e = r.eval;
  e.prompt_tokens = j.at("prompt_tokens").get<TokenSeq>();
  e.generated_tokens = j.at("generated_tokens").get<TokenSeq>();
  e.generated_text = j.at("generated_text").get<std::string>();
  e.sentence_texts = j.at("sentence_texts").get<std::vector<std::string>>();
  if (j.contains("concepts")) e.concepts = j["concepts"].get<std::vector<std::string>>();
  const auto prompt_len = e.prompt_tokens.size();
  const auto abs_spans = detail::spans_from(j.at("generated_sentences"), SpanRole::generated);
  for (auto s : abs_spans) {
    if (s.start < prompt_len) throw FormatError("generated sentence starts inside the prompt");
    s.start -= prompt_len;
    s.end -= prompt_len;
    e.generated_sentences.push_back(s);
  }
  r.analysis.prompt_sentences = detail::spans_from(j.at("prompt_sentences"), SpanRole::prompt);
  if (j.contains("concept_spans")) r.concept_spans = detail::spans_from(j["concept_spans"], SpanRole::prompt);
  if (j.contains("trace")) {
    r.analysis.trace = detail::trace_from(j["trace"]);
    r.has_trace = true;
    // A truncated generation can end with a token the model never ran.
    for (std::size_t k = 0; k < abs_spans.size(); ++k) {
      if (abs_spans[k].end < r.analysis.trace.end_position()) {
        r.analysis.generated_sentences.push_back(abs_spans[k]);
        r.analysis.generated_texts.push_back(e.sentence_texts.at(k));
      }
    }
  }
  return r;
}

inline std::vector<LoadedRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open generations file: " + path);
  std::vector<LoadedRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (attnmod::detail::trim_ws(line).empty()) continue;
    try {
      auto r = parse_record(json::parse(line));
      r.line = n;
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw FormatError(path + ":" + std::to_string(n) + ": malformed generation record: " + e.what());
    } catch (const Error& e) {
      throw FormatError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------- verbs

inline void write_text_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << content;
}

struct GenerateSummary {
  std::size_t written = 0;
  std::size_t skipped = 0;
};

// One JSONL line per usable corpus line, in corpus order.
inline GenerateSummary cmd_generate(const Runtime& rt, const std::string& out_path, Log& log) {
  const auto items = read_corpus(rt.config.corpus_path, rt.config.task, log);
  std::vector<std::string> lines(items.size());
  const auto errors = parallel_for(items.size(), rt.config.workers, [&](std::size_t i) {
    const auto p = prepare_prompt(items[i], rt.config.task, rt.tokenizer, rt.config.narrative_sentences);
    lines[i] = record_json(rt, items[i], p, generate_one(rt, p)).dump();
  });
  GenerateSummary s;
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (errors[i]) {
      rethrow_if_config(errors[i]);
      ++s.skipped;
      log.warn(rt.config.corpus_path + ":" + std::to_string(items[i].line) + ": skipped: " + describe(errors[i]));
      continue;
    }
    out += lines[i];
    out += '\n';
    ++s.written;
  }
  write_text_file(out_path, out);
  return s;
}

// Coverage decoding once per concept-order permutation; keeps the best run.
inline GenerateSummary cmd_permute(Runtime rt, const std::string& out_path, Log& log) {
  if (rt.config.task != TaskMode::constrained) throw ConfigError("permute needs task = constrained");
  if (rt.modulation.strategy != Strategy::coverage) {
    log.note("permute runs coverage modulation; strategy set to coverage");
    rt.config.modulation.strategy = Strategy::coverage;
    rt.modulation = effective_modulation(rt.config, rt.model.config.n_layers, log);
    rt.modulation.validate(rt.model.config.n_layers);
  }
  const auto items = read_corpus(rt.config.corpus_path, rt.config.task, log);
  std::vector<std::string> lines(items.size());
  const auto errors = parallel_for(items.size(), rt.config.workers, [&](std::size_t i) {
    const auto p = prepare_prompt(items[i], rt.config.task, rt.tokenizer, rt.config.narrative_sentences);
    auto run = [&](const std::vector<float>& w) {
      auto rec = generate_one(rt, p, w);
      const auto cov = covered_concepts(*rt.lexicon, p.concepts.texts, rt.tokenizer.decode(rec.generated));
      return std::pair{std::move(rec), static_cast<std::size_t>(std::count(cov.begin(), cov.end(), true))};
    };
    const auto res = permutation_generate(p.concepts.concepts.size(), run, rt.config.permutation_cap);
    json j = record_json(rt, items[i], p, res.selected.record);
    j["concepts_covered"] = res.selected.covered;
    json all = json::array();
    for (const auto& o : res.all) {
      all.push_back({{"order_weights", o.order_weights},
                     {"covered", o.covered},
                     {"generated_length", o.record.generated.size()},
                     {"generated_text", rt.tokenizer.decode(o.record.generated)}});
    }
    j["permutations"] = std::move(all);
    lines[i] = j.dump();
  });
  GenerateSummary s;
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (errors[i]) {
      rethrow_if_config(errors[i]);
      ++s.skipped;
      log.warn(rt.config.corpus_path + ":" + std::to_string(items[i].line) + ": skipped: " + describe(errors[i]));
      continue;
    }
    out += lines[i];
    out += '\n';
    ++s.written;
  }
  write_text_file(out_path, out);
  return s;
}

enum class AnalysisKind { heatmap, change, entropy, portion };

inline AnalysisKind parse_analysis_kind(std::string_view s) {
  if (s == "heatmap") return AnalysisKind::heatmap;
  if (s == "change") return AnalysisKind::change;
  if (s == "entropy") return AnalysisKind::entropy;
  if (s == "portion") return AnalysisKind::portion;
  throw ConfigError("unknown analysis '" + std::string(s) + "' (expected heatmap, change, entropy or portion)");
}

struct AnalyzeOptions {
  std::size_t generated_sentence = 0;  // heatmap: which g
};

namespace detail {

inline bool full_trace(const AttentionTrace& t) {
  if (t.empty() || t.first_position() != 0) return false;
  for (std::size_t l = 0; l < t.n_layers(); ++l) {
    for (std::size_t h = 0; h < t.n_heads(); ++h) {
      if (!t.has(l, h)) return false;
    }
  }
  return true;
}

inline void require_traces(const std::vector<LoadedRecord>& records, const std::string& path) {
  for (const auto& r : records) {
    if (!r.has_trace || !full_trace(r.analysis.trace)) {
      throw TraceError(path + ":" + std::to_string(r.line) +
                       ": record has no full attention trace; rerun generate with --trace all");
    }
  }
}

inline std::string csv_number(std::optional<double> v) { return v ? format_number(*v) : std::string(); }

}  // namespace detail

// Writes CSV files into out_dir and returns their names.
inline std::vector<std::string> cmd_analyze(AnalysisKind kind, const std::string& records_path,
                                            const std::string& out_dir, const AnalyzeOptions& opt, Log& log) {
  const auto loaded = read_records(records_path);
  detail::require_traces(loaded, records_path);
  std::vector<AnalysisRecord> recs;
  recs.reserve(loaded.size());
  for (const auto& r : loaded) recs.push_back(r.analysis);
  fs::create_directories(out_dir);
  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const std::string& content) {
    write_text_file(fs::path(out_dir) / name, content);
    written.push_back(name);
  };
  std::size_t n_p = SIZE_MAX;
  for (const auto& r : recs) n_p = std::min(n_p, r.prompt_sentences.size());
  if (recs.empty()) n_p = 0;

  switch (kind) {
    case AnalysisKind::heatmap: {
      const std::size_t g = opt.generated_sentence;
      std::vector<const AnalysisRecord*> with_g;
      for (const auto& r : recs) {
        if (r.generated_sentences.size() > g) with_g.push_back(&r);
      }
      if (with_g.empty()) {
        log.warn("no record has generated sentence " + std::to_string(g) + "; nothing written");
        break;
      }
      const auto& t0 = with_g.front()->trace;
      std::vector<LayerHeadGrid> grids;
      for (std::size_t p = 0; p < n_p; ++p) {
        LayerHeadGrid sum(t0.n_layers(), t0.n_heads());
        for (const auto* r : with_g) {
          const auto grid = sent_attn_grid(r->trace, r->generated_sentences[g], r->prompt_sentences[p], SentStat::mean);
          if (grid.values.size() != sum.values.size()) throw DimensionError("records disagree on model shape");
          for (std::size_t k = 0; k < sum.values.size(); ++k) sum.values[k] += grid.values[k];
        }
        for (double& v : sum.values) v /= static_cast<double>(with_g.size());
        std::ostringstream csv;
        write_heatmap_csv(csv, sum);
        emit("heatmap_g" + std::to_string(g) + "_p" + std::to_string(p) + ".csv", csv.str());
        grids.push_back(std::move(sum));
      }
      if (grids.size() == 2) {
        const auto [a, b] = heatmap_ratio(grids[0], grids[1]);
        std::ostringstream ca, cb;
        write_heatmap_csv(ca, a);
        write_heatmap_csv(cb, b);
        emit("heatmap_ratio_g" + std::to_string(g) + "_p0.csv", ca.str());
        emit("heatmap_ratio_g" + std::to_string(g) + "_p1.csv", cb.str());
      }
      break;
    }
    case AnalysisKind::change: {
      std::size_t max_pairs = 0;
      for (const auto& r : recs) {
        if (r.generated_sentences.size() >= 2) max_pairs = std::max(max_pairs, r.generated_sentences.size() - 1);
      }
      std::ostringstream csv;
      csv << "subset,pair,prompt_sentence,delta,count\n";
      const char* names[] = {"all", "repeated", "different"};
      for (int subset = 0; subset < 3; ++subset) {
        // Totals over every pair, weighted by the number of records per pair.
        std::vector<double> total(n_p, 0.0);
        std::size_t total_count = 0;
        std::ostringstream rows;
        for (std::size_t i = 0; i < max_pairs; ++i) {
          const auto split = split_by_repetition(recs, i);
          std::vector<const AnalysisRecord*> set;
          if (subset != 2) set.insert(set.end(), split.repeated.begin(), split.repeated.end());
          if (subset != 1) set.insert(set.end(), split.different.begin(), split.different.end());
          if (subset == 0) {
            // Keep corpus order for the full set.
            set.clear();
            for (const auto& r : recs) {
              if (r.generated_sentences.size() >= i + 2 && r.generated_texts.size() >= i + 2) set.push_back(&r);
            }
          }
          for (std::size_t p = 0; p < n_p; ++p) {
            std::optional<double> d;
            if (!set.empty()) {
              d = attn_change(set, p, i);
              total[p] += *d * static_cast<double>(set.size());
            }
            rows << names[subset] << ',' << i << ',' << p << ',' << detail::csv_number(d) << ',' << set.size()
                 << '\n';
          }
          total_count += set.size();
        }
        for (std::size_t p = 0; p < n_p; ++p) {
          std::optional<double> d;
          if (total_count > 0) d = total[p] / static_cast<double>(total_count);
          csv << names[subset] << ",all," << p << ',' << detail::csv_number(d) << ',' << total_count << '\n';
        }
        csv << rows.str();
      }
      emit("change.csv", csv.str());
      break;
    }
    case AnalysisKind::entropy: {
      std::ostringstream csv;
      csv << "layer,prompt_sentence,entropy\n";
      std::vector<const AnalysisRecord*> with_g;
      for (const auto& r : recs) {
        if (!r.generated_sentences.empty()) with_g.push_back(&r);
      }
      if (!with_g.empty()) {
        const std::size_t L = with_g.front()->trace.n_layers();
        for (std::size_t l = 0; l < L; ++l) {
          for (std::size_t p = 0; p < n_p; ++p) {
            std::vector<EntropyItem> items;
            for (const auto* r : with_g) items.push_back({&r->trace, r->generated_sentences[0], r->prompt_sentences[p]});
            csv << l << ',' << p << ',' << format_number(attn_entropy(items, l)) << '\n';
          }
        }
      } else {
        log.warn("no record has a generated sentence; entropy table is empty");
      }
      emit("entropy.csv", csv.str());
      break;
    }
    case AnalysisKind::portion: {
      std::ostringstream csv;
      csv << "layer";
      for (std::size_t p = 0; p < n_p; ++p) csv << ",p" << p;
      csv << '\n';
      bool any = false;
      for (const auto& r : recs) any = any || !r.generated_sentences.empty();
      if (any) {
        const auto table = attn_portion(recs);
        for (std::size_t l = 0; l < table.size(); ++l) {
          csv << l;
          for (double v : table[l]) csv << ',' << format_number(v);
          csv << '\n';
        }
      } else {
        log.warn("no record has a generated sentence; portion table is empty");
      }
      emit("portion.csv", csv.str());
      break;
    }
  }
  return written;
}

// Degeneration and coverage metrics over a generations file.
inline json cmd_eval(const std::string& records_path, const std::string& out_dir, const InflectionLexicon& lexicon,
                     Log& log) {
  const auto loaded = read_records(records_path);
  std::vector<EvalRecord> recs;
  for (const auto& r : loaded) recs.push_back(r.eval);

  json report;
  report["records"] = recs.size();
  std::ostringstream csv;
  csv << "metric,horizon,value\n";
  auto opt_json = [](std::optional<double> v) { return v ? json(*v) : json(nullptr); };
  json uniq = json::object(), uniq_occ = json::object(), rel = json::object(), rep = json::object();
  std::vector<std::pair<std::string, std::size_t>> horizons;
  for (std::size_t h = 1; h <= 5; ++h) horizons.emplace_back(std::to_string(h), h);
  horizons.emplace_back("all", kAllSentences);
  for (const auto& [name, h] : horizons) {
    const auto u = unique_tokens(recs, h);
    const auto r = relevancy(recs, h);
    const auto s = sentence_repetition(recs, h);
    uniq[name] = u.types;
    uniq_occ[name] = u.occurrences;
    rel[name] = opt_json(r);
    rep[name] = opt_json(s);
    csv << "unique_tokens," << name << ',' << u.types << '\n';
    csv << "token_occurrences," << name << ',' << u.occurrences << '\n';
    csv << "relevancy," << name << ',' << detail::csv_number(r) << '\n';
    csv << "repetition," << name << ',' << detail::csv_number(s) << '\n';
  }
  report["unique_tokens"] = uniq;
  report["token_occurrences"] = uniq_occ;
  report["relevancy"] = rel;
  report["repetition"] = rep;

  const bool constrained = std::any_of(recs.begin(), recs.end(), [](const EvalRecord& r) { return !r.concepts.empty(); });
  if (constrained) {
    const auto cov = concept_coverage(recs, lexicon);
    report["coverage"] = {{"percent", opt_json(cov.percent)},
                          {"concepts_covered", cov.concepts_covered},
                          {"concepts_total", cov.concepts_total}};
    csv << "coverage,all," << detail::csv_number(cov.percent) << '\n';

    const bool traced = std::all_of(loaded.begin(), loaded.end(), [](const LoadedRecord& r) {
      return r.has_trace && detail::full_trace(r.analysis.trace);
    });
    if (traced) {
      std::vector<CoverageAttentionItem> items;
      for (const auto& r : loaded) {
        const std::size_t start = r.eval.prompt_tokens.size();
        const std::size_t end = std::min(start + r.eval.generated_tokens.size(), r.analysis.trace.end_position());
        if (r.eval.concepts.empty() || end <= start) continue;
        items.push_back({&r.analysis.trace, r.concept_spans, r.eval.concepts,
                         SentenceSpan{start, end - 1, SpanRole::generated, 0}, r.eval.generated_text});
      }
      const auto ca = coverage_attention_report(items, lexicon);
      auto stats = [](const AttentionStats& s) { return json{{"mean", s.mean}, {"sd", s.sd}, {"count", s.count}}; };
      json j{{"covered", ca.covered.count ? stats(ca.covered) : json(nullptr)},
               {"uncovered", ca.uncovered ? stats(*ca.uncovered) : json(nullptr)}};
      if (!ca.note.empty()) j["note"] = ca.note;
      report["coverage_attention"] = j;
      csv << "coverage_attention_covered_mean,all," << (ca.covered.count ? format_number(ca.covered.mean) : std::string())
          << '\n';
      csv << "coverage_attention_uncovered_mean,all,"
          << (ca.uncovered ? format_number(ca.uncovered->mean) : std::string()) << '\n';
    } else {
      log.note("generations carry no full traces; skipping coverage attention");
    }
  }
  fs::create_directories(out_dir);
  write_text_file(fs::path(out_dir) / "report.json", report.dump(2) + "\n");
  write_text_file(fs::path(out_dir) / "report.csv", csv.str());
  return report;
}

}  // namespace attnmod::cli
