#pragma once

#include <cstdint>
#include <vector>

#include "moekit/model.hpp"

namespace moekit {

struct LayerStats {
  int n = 0;  // routing slots of the original layer

  // Mean expert output over all calibration tokens, every expert evaluated
  // densely on every token regardless of routing. Row i is o_i (d_h).
  Mat mean_output;

  // Times slot i appeared in the top-k. sum == k * tokens.
  std::vector<std::uint64_t> frequency;

  // Accumulated routing probability per slot. sum ~= tokens.
  std::vector<double> router_score;

  // Row i: mean router logit vector over the tokens that selected expert i;
  // rows of never-selected experts fall back to the global mean. Feeds the
  // router-logit-profile feature variant.
  Mat mean_selected_logits;  // n x n
  std::vector<double> mean_logits;  // global mean logit per slot

  // Optional per-expert intermediate activations (tokens x d_m each),
  // silu(x W_gate) * (x W_up) per token row. Empty unless caching was on.
  std::vector<Mat> activations;
};

struct CalibrationStats {
  int tokens = 0;
  int d_h = 0;
  int d_m = 0;
  bool has_activations = false;
  std::vector<LayerStats> layers;
};

struct CollectOptions {
  bool cache_activations = false;
  // Guard for the activation cache; exceeding it raises a Resource error
  // naming the tokens x d_m x n allocation instead of attempting it.
  std::uint64_t activation_cache_limit_bytes = 2ULL << 30;
};

// Runs the calibration batch through the model. Layer l sees the true
// outputs of layers 0..l-1; statistics come from the unmodified model.
CalibrationStats collect_stats(const MoeModel& m, const TokenBatch& batch,
                               const CollectOptions& opts = {});

// rows x d_m matrix of intermediate activations for one expert.
// apply_nonlinearity=false drops the silu factor: rows become (x W_gate) * (x W_up).
Mat activation_features(const ExpertWeights& e, const Mat& rows, bool apply_nonlinearity = true);

}  // namespace moekit
