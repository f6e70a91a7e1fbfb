#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

namespace attnmod {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

enum class SpanRole { prompt, generated };

inline std::string_view to_string(SpanRole role) {
  return role == SpanRole::prompt ? "prompt" : "generated";
}

// Closed token interval [start, end] delimiting one sentence.
struct SentenceSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  SpanRole role = SpanRole::prompt;
  std::size_t ordinal = 0;

  std::size_t size() const noexcept { return end - start + 1; }
  bool contains(std::size_t pos) const noexcept { return pos >= start && pos <= end; }

  friend bool operator==(const SentenceSpan&, const SentenceSpan&) = default;
};

// Moves spans computed over a sub-sequence into absolute positions.
inline std::vector<SentenceSpan> offset_spans(std::vector<SentenceSpan> spans, std::size_t offset,
                                              SpanRole role) {
  for (auto& s : spans) {
    s.start += offset;
    s.end += offset;
    s.role = role;
  }
  return spans;
}

}  // namespace attnmod
