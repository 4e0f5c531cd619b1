#include "moekit/calibration.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "moekit/forward.hpp"
#include "moekit/threading.hpp"

namespace moekit {

Mat activation_features(const ExpertWeights& e, const Mat& rows, bool apply_nonlinearity) {
  int d_h = e.w_gate.rows;
  int d_m = e.w_gate.cols;
  if (rows.cols != d_h) fail(ErrorCode::Dimension, "activation rows do not match d_h");
  Mat out(rows.rows, d_m);
#pragma omp parallel for num_threads(thread_cap()) schedule(static)
  for (int t = 0; t < rows.rows; ++t) {
    const float* x = rows.row(t);
    std::vector<double> g(d_m, 0.0), u(d_m, 0.0);
    for (int j = 0; j < d_h; ++j) {
      double xj = x[j];
      const float* wg = e.w_gate.row(j);
      const float* wu = e.w_up.row(j);
      for (int p = 0; p < d_m; ++p) {
        g[p] += xj * wg[p];
        u[p] += xj * wu[p];
      }
    }
    float* dst = out.row(t);
    for (int p = 0; p < d_m; ++p) {
      float z = static_cast<float>(g[p]);
      float gate = apply_nonlinearity ? silu(z) : z;
      dst[p] = gate * static_cast<float>(u[p]);
    }
  }
  return out;
}

CalibrationStats collect_stats(const MoeModel& m, const TokenBatch& batch,
                               const CollectOptions& opts) {
  validate_model(m, false);
  int tokens = batch.tokens();
  if (tokens <= 0) fail(ErrorCode::Argument, "calibration batch is empty");
  if (batch.x.cols != m.d_h) fail(ErrorCode::Dimension, "batch width does not match model d_h");

  CalibrationStats stats;
  stats.tokens = tokens;
  stats.d_h = m.d_h;
  stats.d_m = m.d_m;
  stats.has_activations = opts.cache_activations;

  if (opts.cache_activations) {
    std::uint64_t total = 0;
    for (const MoeLayer& layer : m.layers)
      total += static_cast<std::uint64_t>(tokens) * m.d_m * layer.slots() * sizeof(float);
    if (total > opts.activation_cache_limit_bytes)
      fail(ErrorCode::Resource,
           "activation cache of " + std::to_string(tokens) + "x" + std::to_string(m.d_m) + "x" +
               std::to_string(m.layers.empty() ? 0 : m.layers[0].slots()) +
               " floats per layer needs " + std::to_string(total) + " bytes, limit is " +
               std::to_string(opts.activation_cache_limit_bytes));
  }

  Mat cur = batch.x;
  for (const MoeLayer& layer : m.layers) {
    int n = layer.slots();
    LayerStats ls;
    ls.n = n;
    ls.mean_output = Mat(n, m.d_h);
    ls.frequency.assign(n, 0);
    ls.router_score.assign(n, 0.0);
    ls.mean_selected_logits = Mat(n, n);
    ls.mean_logits.assign(n, 0.0);

    // Routing and next-layer inputs, token rows independent.
    Mat logits(tokens, n);
    Mat next(tokens, m.d_h);
    std::vector<std::int32_t> sel(static_cast<size_t>(tokens) * layer.k);
    std::vector<float> sel_p(static_cast<size_t>(tokens) * layer.k);
#pragma omp parallel for num_threads(thread_cap()) schedule(static)
    for (int t = 0; t < tokens; ++t) {
      const float* x = cur.row(t);
      router_logits(layer, x, logits.row(t));
      Routing r = route_from_logits(logits.row(t), n, layer.k);
      for (int j = 0; j < layer.k; ++j) {
        sel[static_cast<size_t>(t) * layer.k + j] = r.slots[j];
        sel_p[static_cast<size_t>(t) * layer.k + j] = r.probs[j];
      }
      smoe_forward(layer, m.d_h, m.d_m, x, next.row(t));
    }

    // Frequency / score / logit-profile accumulation in fixed token order.
    std::vector<double> sel_logit_sum(static_cast<size_t>(n) * n, 0.0);
    std::vector<double> logit_sum(n, 0.0);
    for (int t = 0; t < tokens; ++t) {
      const float* lt = logits.row(t);
      for (int i = 0; i < n; ++i) logit_sum[i] += lt[i];
      for (int j = 0; j < layer.k; ++j) {
        int slot = sel[static_cast<size_t>(t) * layer.k + j];
        ls.frequency[slot] += 1;
        ls.router_score[slot] += sel_p[static_cast<size_t>(t) * layer.k + j];
        double* dst = sel_logit_sum.data() + static_cast<size_t>(slot) * n;
        for (int i = 0; i < n; ++i) dst[i] += lt[i];
      }
    }
    for (int i = 0; i < n; ++i) ls.mean_logits[i] = logit_sum[i] / tokens;
    for (int i = 0; i < n; ++i) {
      if (ls.frequency[i] > 0) {
        double inv = 1.0 / static_cast<double>(ls.frequency[i]);
        for (int c = 0; c < n; ++c)
          ls.mean_selected_logits.at(i, c) =
              static_cast<float>(sel_logit_sum[static_cast<size_t>(i) * n + c] * inv);
      } else {
        // Never-selected experts fall back to the global mean profile.
        for (int c = 0; c < n; ++c)
          ls.mean_selected_logits.at(i, c) = static_cast<float>(ls.mean_logits[c]);
      }
    }

    // Dense mean outputs: every expert sees every token, no routing mask.
    if (opts.cache_activations) {
      ls.activations.assign(n, Mat());
      for (int i = 0; i < n; ++i) ls.activations[i] = Mat(tokens, m.d_m);
    }
#pragma omp parallel for num_threads(thread_cap()) schedule(static)
    for (int i = 0; i < n; ++i) {
      const ExpertWeights& e = layer.experts[layer.remap[i]];
      std::vector<double> acc(m.d_h, 0.0);
      std::vector<float> y(m.d_h);
      for (int t = 0; t < tokens; ++t) {
        float* act_dst = opts.cache_activations ? ls.activations[i].row(t) : nullptr;
        expert_forward(e, cur.row(t), m.d_h, m.d_m, y.data(), act_dst);
        for (int q = 0; q < m.d_h; ++q) acc[q] += y[q];
      }
      float* dst = ls.mean_output.row(i);
      for (int q = 0; q < m.d_h; ++q) dst[q] = static_cast<float>(acc[q] / tokens);
    }

    stats.layers.push_back(std::move(ls));
    cur = std::move(next);
  }
  return stats;
}

}  // namespace moekit
