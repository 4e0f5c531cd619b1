#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <doctest.h>

#include "moekit/error.hpp"
#include "moekit/model.hpp"
#include "moekit/rng.hpp"

namespace testutil {

using namespace moekit;

inline Mat random_mat(Rng& rng, int r, int c, double scale = 1.0) {
  Mat m(r, c);
  for (float& v : m.data) v = static_cast<float>(rng.next_normal() * scale);
  return m;
}

inline ExpertWeights random_expert(Rng& rng, int d_h, int d_m) {
  double s = 1.0 / std::sqrt(static_cast<double>(d_h));
  ExpertWeights e;
  e.w_gate = random_mat(rng, d_h, d_m, s);
  e.w_up = random_mat(rng, d_h, d_m, s);
  e.w_down = random_mat(rng, d_m, d_h, s);
  return e;
}

inline MoeLayer random_layer(Rng& rng, int d_h, int d_m, int n, int k) {
  MoeLayer layer;
  layer.router = random_mat(rng, d_h, n, 1.0 / std::sqrt(static_cast<double>(d_h)));
  for (int i = 0; i < n; ++i) layer.experts.push_back(random_expert(rng, d_h, d_m));
  layer.remap.resize(n);
  for (int i = 0; i < n; ++i) layer.remap[i] = i;
  layer.k = k;
  return layer;
}

inline MoeModel random_model(Rng& rng, int layers, int d_h, int d_m, int n, int k) {
  MoeModel m;
  m.d_h = d_h;
  m.d_m = d_m;
  for (int l = 0; l < layers; ++l) m.layers.push_back(random_layer(rng, d_h, d_m, n, k));
  return m;
}

inline TokenBatch random_batch(Rng& rng, int tokens, int d_h) {
  TokenBatch b;
  b.x = random_mat(rng, tokens, d_h);
  return b;
}

// sum over rows of ||a - b||_2 divided by sum over rows of ||b||_2.
inline double rel_l2(const Mat& a, const Mat& b) {
  REQUIRE(a.rows == b.rows);
  REQUIRE(a.cols == b.cols);
  double num = 0.0, den = 0.0;
  for (int t = 0; t < a.rows; ++t) {
    double dn = 0.0, dd = 0.0;
    for (int c = 0; c < a.cols; ++c) {
      double d = static_cast<double>(a.at(t, c)) - b.at(t, c);
      dn += d * d;
      dd += static_cast<double>(b.at(t, c)) * b.at(t, c);
    }
    num += std::sqrt(dn);
    den += std::sqrt(dd);
  }
  return den > 0.0 ? num / den : num;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - b.data[i]));
  return m;
}

inline bool bitwise_equal(const Mat& a, const Mat& b) {
  return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

template <typename F>
ErrorCode thrown_code(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected a moekit::Error");
  return ErrorCode::Io;
}

template <typename F>
std::string thrown_message(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  FAIL("expected a moekit::Error");
  return {};
}

// Fresh per-test scratch directory under the build tree.
inline std::string temp_dir(const std::string& tag) {
  namespace fs = std::filesystem;
  fs::path p = fs::temp_directory_path() / ("moekit_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

}  // namespace testutil
