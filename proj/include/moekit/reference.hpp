#pragma once

#include <vector>

#include "moekit/model.hpp"

// Serial reference implementations. Plain scalar loops, written without the
// optimized kernels' loop interchanges or grouping, kept as the comparison
// baseline for tests and for the kernel benchmark. Nothing here may call
// into the parallel implementations.
namespace moekit::ref {

std::vector<float> expert_forward(const ExpertWeights& e, const float* x, int d_h, int d_m);

// Dense recomputation: evaluates every expert, zeroes the weights of slots
// outside the top-k, and sums in slot order.
std::vector<float> smoe_forward_dense(const MoeLayer& layer, int d_h, int d_m, const float* x);

Mat model_forward(const MoeModel& m, const TokenBatch& batch);

// Per-token recount of routing frequencies and accumulated router scores.
void recount_routing(const MoeModel& m, const TokenBatch& batch,
                     std::vector<std::vector<std::uint64_t>>& freq_out,
                     std::vector<std::vector<double>>& score_out);

DistMatrix distance_matrix(const Mat& features);

double silhouette(const Mat& features, const std::vector<int>& labels, int r, bool cosine);
double dunn_index(const Mat& features, const std::vector<int>& labels, int r, bool cosine);

ExpertWeights merge_linear(const std::vector<const ExpertWeights*>& members,
                           const std::vector<double>& alphas, int d_h, int d_m);

}  // namespace moekit::ref
