#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "moekit/error.hpp"

namespace moekit {

// Dense row-major float32 matrix. All model weights, token batches and
// feature matrices use this layout; accumulations happen in double.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0f) {
    if (r < 0 || c < 0) fail(ErrorCode::Dimension, "negative matrix shape");
  }

  float* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const float* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
  float& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  float at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  size_t size() const { return data.size(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// Symmetric pairwise-distance matrix kept in double so linkage comparisons
// and monotonicity checks are not at the mercy of f32 rounding.
struct DistMatrix {
  int n = 0;
  std::vector<double> d;

  DistMatrix() = default;
  explicit DistMatrix(int n_) : n(n_), d(static_cast<size_t>(n_) * n_, 0.0) {}

  double at(int i, int j) const { return d[static_cast<size_t>(i) * n + j]; }
  double& at(int i, int j) { return d[static_cast<size_t>(i) * n + j]; }
};

inline void require_shape(const Mat& m, int rows, int cols, const char* what) {
  if (m.rows != rows || m.cols != cols)
    fail(ErrorCode::Dimension, std::string(what) + ": expected " + std::to_string(rows) + "x" +
                                   std::to_string(cols) + ", got " + std::to_string(m.rows) + "x" +
                                   std::to_string(m.cols));
}

inline bool all_finite(const Mat& m) {
  for (float v : m.data)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace moekit
