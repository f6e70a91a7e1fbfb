#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "attnmod/error.hpp"

namespace attnmod {

// Which (layer, head) slots a forward pass should record. Empty masks mean
// "all layers" / "all heads".
struct TraceRequest {
  bool enabled = false;
  std::vector<bool> layers;
  std::vector<bool> heads;

  static TraceRequest none() { return {}; }
  static TraceRequest all() { return {true, {}, {}}; }
  static TraceRequest layer_range(std::size_t n_layers, std::size_t first, std::size_t last) {
    TraceRequest r{true, std::vector<bool>(n_layers, false), {}};
    for (std::size_t l = first; l < last && l < n_layers; ++l) r.layers[l] = true;
    return r;
  }

  bool wants(std::size_t layer, std::size_t head) const {
    if (!enabled) return false;
    if (!layers.empty() && (layer >= layers.size() || !layers[layer])) return false;
    if (!heads.empty() && (head >= heads.size() || !heads[head])) return false;
    return true;
  }

  // Union of two requests; the result records every slot either one wants.
  TraceRequest merged(const TraceRequest& other, std::size_t n_layers, std::size_t n_heads) const {
    if (!enabled) return other;
    if (!other.enabled) return *this;
    TraceRequest r{true, std::vector<bool>(n_layers), std::vector<bool>(n_heads, true)};
    // Head masks only ever restrict, so an exact union needs per-slot masks;
    // fall back to all heads whenever the two disagree.
    if (heads == other.heads) r.heads = heads;
    for (std::size_t l = 0; l < n_layers; ++l) {
      bool any = false;
      for (std::size_t h = 0; h < n_heads; ++h) any = any || wants(l, h) || other.wants(l, h);
      r.layers[l] = any;
    }
    return r;
  }
};

// Attention rows alpha^{l,h}_{i,.} for a contiguous range of query positions
// [first_position, end_position). The row of query position i has i + 1
// entries (keys 0..i), so each slot stores a lower-triangular band.
class AttentionTrace {
 public:
  AttentionTrace() = default;

  AttentionTrace(std::size_t n_layers, std::size_t n_heads, const TraceRequest& request,
                 std::size_t first_position, std::size_t end_position, std::size_t step = 0)
      : n_layers_(n_layers),
        n_heads_(n_heads),
        first_(first_position),
        end_(end_position),
        step_(step),
        tracked_(n_layers * n_heads, false),
        slots_(n_layers * n_heads) {
    const std::size_t len = band_size(first_, end_);
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        if (request.wants(l, h)) {
          tracked_[l * n_heads + h] = true;
          slots_[l * n_heads + h].assign(len, 0.0f);
        }
      }
    }
  }

  std::size_t n_layers() const noexcept { return n_layers_; }
  std::size_t n_heads() const noexcept { return n_heads_; }
  std::size_t first_position() const noexcept { return first_; }
  std::size_t end_position() const noexcept { return end_; }
  std::size_t step() const noexcept { return step_; }
  bool empty() const noexcept { return n_layers_ == 0 || end_ == first_; }

  bool has(std::size_t layer, std::size_t head) const {
    return layer < n_layers_ && head < n_heads_ && tracked_[layer * n_heads_ + head];
  }

  bool has_row(std::size_t layer, std::size_t head, std::size_t pos) const {
    return has(layer, head) && pos >= first_ && pos < end_;
  }

  std::span<const float> row(std::size_t layer, std::size_t head, std::size_t pos) const {
    check(layer, head, pos);
    return {slots_[layer * n_heads_ + head].data() + band_size(first_, pos), pos + 1};
  }

  std::span<float> mutable_row(std::size_t layer, std::size_t head, std::size_t pos) {
    check(layer, head, pos);
    return {slots_[layer * n_heads_ + head].data() + band_size(first_, pos), pos + 1};
  }

  // alpha^{l,h}_{i,j}; zero for j > i.
  float at(std::size_t layer, std::size_t head, std::size_t i, std::size_t j) const {
    if (j > i) {
      check(layer, head, i);
      return 0.0f;
    }
    return row(layer, head, i)[j];
  }

  // Appends the rows of a trace that starts where this one ends. Slots not
  // tracked by both traces are dropped.
  void extend(const AttentionTrace& next) {
    if (empty() && slots_.empty()) {
      *this = next;
      return;
    }
    if (next.n_layers_ != n_layers_ || next.n_heads_ != n_heads_) {
      throw TraceError("cannot extend a trace with a different layer/head grid");
    }
    if (next.first_ != end_) {
      throw TraceError("trace extension must start at position " + std::to_string(end_) + ", got " +
                       std::to_string(next.first_));
    }
    for (std::size_t s = 0; s < slots_.size(); ++s) {
      if (tracked_[s] && next.tracked_[s]) {
        slots_[s].insert(slots_[s].end(), next.slots_[s].begin(), next.slots_[s].end());
      } else {
        tracked_[s] = false;
        slots_[s].clear();
      }
    }
    end_ = next.end_;
    step_ = next.step_;
  }

  friend bool operator==(const AttentionTrace&, const AttentionTrace&) = default;

 private:
  static std::size_t band_size(std::size_t first, std::size_t end) {
    return end * (end + 1) / 2 - first * (first + 1) / 2;
  }

  void check(std::size_t layer, std::size_t head, std::size_t pos) const {
    if (!has(layer, head)) {
      throw TraceError("trace has no entries for layer " + std::to_string(layer) + ", head " +
                       std::to_string(head));
    }
    if (pos < first_ || pos >= end_) {
      throw TraceError("trace for layer " + std::to_string(layer) + ", head " + std::to_string(head) +
                       " has no row for position " + std::to_string(pos));
    }
  }

  std::size_t n_layers_ = 0;
  std::size_t n_heads_ = 0;
  std::size_t first_ = 0;
  std::size_t end_ = 0;
  std::size_t step_ = 0;
  std::vector<bool> tracked_;
  std::vector<std::vector<float>> slots_;
};

}  // namespace attnmod
