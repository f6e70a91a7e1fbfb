#pragma once

// Dense float kernels shared by the engine. Everything here is a pure
// function of its inputs: same inputs, bit-identical outputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnmod/error.hpp"

namespace attnmod {

// Additive surrogate for -inf used by causal masking.
inline constexpr float kMaskedLogit = -1e9f;

// Read-only view of a row-major block with an arbitrary row stride, so that a
// head's column slice of a wider matrix can be addressed without copying.
struct MatrixView {
  const float* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t stride = 0;

  std::span<const float> row(std::size_t r) const { return {data + r * stride, cols}; }
  float operator()(std::size_t r, std::size_t c) const { return data[r * stride + c]; }

  MatrixView top_rows(std::size_t n) const { return {data, std::min(n, rows), cols, stride}; }
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) + " != " +
                           std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<float>> init) {
    rows_ = init.size();
    cols_ = rows_ == 0 ? 0 : init.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : init) {
      if (r.size() != cols_) throw DimensionError("ragged matrix initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  MatrixView view() const { return {data_.data(), rows_, cols_, cols_}; }
  MatrixView column_block(std::size_t first_col, std::size_t n_cols) const {
    if (first_col + n_cols > cols_) throw DimensionError("column block out of range");
    return {data_.data() + first_col, rows_, n_cols, cols_};
  }

  // Appends one row; used by the growing KV cache.
  void push_row(std::span<const float> values) {
    if (rows_ == 0 && cols_ == 0) cols_ = values.size();
    if (values.size() != cols_) throw DimensionError("push_row width mismatch");
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

// Boolean mask where true marks a disallowed key position.
class Mask {
 public:
  Mask(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), blocked_(rows * cols, 0) {}

  // Query row r sits at absolute position offset + r and may see keys 0..offset+r.
  static Mask causal(std::size_t rows, std::size_t cols, std::size_t offset = 0) {
    Mask m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = offset + r + 1; c < cols; ++c) m.set(r, c, true);
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool blocked(std::size_t r, std::size_t c) const { return blocked_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool value) { blocked_[r * cols_ + c] = value ? 1 : 0; }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<unsigned char> blocked_;
};

// In-place softmax with row-max subtraction. The sum is accumulated in double.
inline void softmax_inplace(std::span<float> row) {
  if (row.empty()) throw NumericError("empty attention support");
  const float max_v = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (float& v : row) {
    v = std::exp(v - max_v);
    sum += v;
  }
  const double inv = 1.0 / sum;
  for (float& v : row) v = static_cast<float>(v * inv);
}

inline Matrix softmax_rows(const Matrix& m, const std::optional<Mask>& mask = std::nullopt) {
  if (mask && (mask->rows() != m.rows() || mask->cols() != m.cols())) {
    throw DimensionError("mask shape does not match matrix");
  }
  Matrix out = m;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = out.row(r);
    if (mask) {
      bool any_open = false;
      for (std::size_t c = 0; c < m.cols(); ++c) {
        if (mask->blocked(r, c)) {
          row[c] += kMaskedLogit;
        } else {
          any_open = true;
        }
      }
      if (!any_open) throw NumericError("empty attention support in row " + std::to_string(r));
    }
    softmax_inplace(row);
    if (mask) {
      for (std::size_t c = 0; c < m.cols(); ++c) {
        if (mask->blocked(r, c)) row[c] = 0.0f;
      }
    }
  }
  return out;
}

// Row-major product with double accumulation in a fixed k-order.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul shape mismatch: " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " * " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Matrix out(n, m);
  std::vector<double> acc(m);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const auto arow = a.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const auto brow = b.row(p);
      for (std::size_t j = 0; j < m; ++j) acc[j] += av * brow[j];
    }
    auto orow = out.row(i);
    for (std::size_t j = 0; j < m; ++j) orow[j] = static_cast<float>(acc[j]);
  }
  return out;
}

// x * W + bias, broadcasting bias over rows.
inline Matrix affine(const Matrix& x, const Matrix& w, std::span<const float> bias) {
  Matrix out = matmul(x, w);
  if (bias.size() != out.cols()) throw DimensionError("affine bias length mismatch");
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bias[c];
  }
  return out;
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("dot length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

inline Matrix layer_norm(const Matrix& x, std::span<const float> gain, std::span<const float> shift,
                         float eps = 1e-5f) {
  if (gain.size() != x.cols() || shift.size() != x.cols()) {
    throw DimensionError("layer_norm gain/shift length must equal column count");
  }
  Matrix out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    double mean = 0.0;
    for (float v : in) mean += v;
    mean /= n;
    double var = 0.0;
    for (float v : in) var += (v - mean) * (v - mean);
    var /= n;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = static_cast<float>((in[c] - mean) * inv_std) * gain[c] + shift[c];
    }
  }
  return out;
}

// tanh approximation used by GPT-2.
inline float gelu(float x) {
  constexpr float kSqrt2OverPi = 0.7978845608028654f;
  return 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + 0.044715f * x * x * x)));
}

inline Matrix gelu(const Matrix& x) {
  Matrix out = x;
  for (float& v : out.data()) v = gelu(v);
  return out;
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("add shape mismatch");
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += bd[i];
}

}  // namespace attnmod
