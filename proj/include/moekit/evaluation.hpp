#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "moekit/calibration.hpp"
#include "moekit/clustering.hpp"
#include "moekit/model.hpp"

namespace moekit {

struct QualityReport {
  double l2_error = 0.0;       // sum over tokens of per-token L2 distance
  double l2_error_mean = 0.0;  // the same divided by the token count
  double cosine_sim = 0.0;     // mean per-token cosine similarity

  double silhouette_euclidean = std::numeric_limits<double>::quiet_NaN();
  double silhouette_cosine = std::numeric_limits<double>::quiet_NaN();
  double dunn_euclidean = std::numeric_limits<double>::quiet_NaN();
  double dunn_cosine = std::numeric_limits<double>::quiet_NaN();

  // min over tokens and layers of (bound - error); >= -1e-6 when valid.
  double jensen_slack_min = std::numeric_limits<double>::quiet_NaN();
};

// Runs both models on the batch and compares final outputs. Tokens whose
// outputs are both zero count as cosine 1, a single zero side as 0.
QualityReport output_fidelity(const MoeModel& orig, const MoeModel& reduced,
                              const TokenBatch& batch);

struct JensenCheck {
  double error = 0.0;  // || y_orig - y_merged ||^2
  double bound = 0.0;  // sum_i P_i(x) || E_i(x) - E_merged(g(i))(x) ||^2
};

// Per-token comparison of a layer against its merged counterpart. The
// merged layer must share the router (slot count) of the original.
JensenCheck jensen_check(const MoeLayer& orig, const MoeLayer& merged, int d_h, int d_m,
                         const float* x);

// Mean silhouette width. Singletons score 0; a point whose a and b are both
// zero scores 0. Cosine uses distance 1 - cos(u, v) with zero-norm rows
// treated as similarity 1 against another zero row and 0 otherwise.
double silhouette(const Mat& features, const ClusterAssignment& assign, bool cosine = false);

// min inter-cluster single-link distance / max intra-cluster diameter.
// A zero diameter yields the capped sentinel 1e12 (0 when the numerator is
// also 0); every result is capped at 1e12.
double dunn_index(const Mat& features, const ClusterAssignment& assign, bool cosine = false);

// Pair-counting adjusted Rand index between two labelings.
double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

// Sum of squared distances of each row to its cluster mean.
double partition_cost(const Mat& features, const std::vector<int>& labels, int r);

struct OptPartition {
  std::vector<int> labels;
  double cost = 0.0;
  std::uint64_t enumerated = 0;  // must equal stirling2(n, r)
};

// Exact minimum-cost partition into r clusters by enumerating restricted
// growth strings (ties keep the lexicographically smallest string).
// Guarded to n <= 12.
OptPartition opt_partition_oracle(const Mat& features, int r);

// Stirling numbers of the second kind, n <= 20.
std::uint64_t stirling2(int n, int r);

// Soft-merged model from per-layer memberships: stored expert j is the
// column-normalized membership-weighted mean of the member experts, the
// router column j is the unnormalized membership-weighted sum of the member
// router columns (so crisp memberships reproduce the hard average merge
// with per-cluster router columns summed), and k clamps to r.
MoeModel build_soft_merged_model(const MoeModel& m, const std::vector<Membership>& per_layer);

// Fuzzy C-means on expert-output features per layer, soft merge to r
// stored experts, fidelity of the result against the original.
QualityReport fcm_merge_eval(const MoeModel& m, const CalibrationStats& stats, int r,
                             const TokenBatch& batch);

}  // namespace moekit
