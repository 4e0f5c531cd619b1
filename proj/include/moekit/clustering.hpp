#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moekit/calibration.hpp"
#include "moekit/mat.hpp"
#include "moekit/model.hpp"

namespace moekit {

enum class FeatureKind {
  ExpertOutput,        // calibrated mean outputs o_i
  RouterWeightColumn,  // column i of W_R
  RouterLogitProfile,  // mean logit vector over tokens that selected i
  Weight,              // flattened W_gate | W_up | W_down
};

const char* feature_kind_name(FeatureKind k);

struct FeatureMatrix {
  Mat rows;  // one row per expert
  FeatureKind kind = FeatureKind::ExpertOutput;
};

FeatureMatrix expert_output_features(const CalibrationStats& stats, int layer);
FeatureMatrix router_weight_column_features(const MoeModel& m, int layer);
FeatureMatrix router_logit_profile_features(const CalibrationStats& stats, int layer);
FeatureMatrix weight_features(const MoeModel& m, int layer);

enum class Linkage { Single, Complete, Average };

const char* linkage_name(Linkage l);

struct MergeStep {
  int a = 0;  // surviving cluster id (min expert index of the pair)
  int b = 0;  // absorbed cluster id
  double dist = 0.0;
};

// Grouping of n experts into r clusters. Labels are 0..r-1 and every label
// occurs at least once. Cluster ids are ordered by smallest member index.
struct ClusterAssignment {
  std::vector<int> labels;
  int r = 0;
  std::vector<MergeStep> merge_trace;  // empty for non-hierarchical methods
};

std::vector<std::vector<int>> cluster_members(const ClusterAssignment& a);

// Fuzzy membership matrix: rows sum to 1.
struct Membership {
  Mat u;  // n x r
};

// Pairwise Euclidean distances between feature rows. Rejects non-finite
// features.
DistMatrix distance_matrix(const Mat& features);

// Naive agglomerative clustering: starts from singletons, repeatedly merges
// the closest active pair under the linkage until r clusters remain. Ties
// on distance pick the lexicographically smallest (a, b) cluster-id pair.
// Deterministic; no seed.
ClusterAssignment hierarchical_cluster(const DistMatrix& dist, int r, Linkage linkage);

enum class KmeansInit { FixedFirstR, Random };

// Lloyd iterations. Assignment ties pick the lowest center index. A cluster
// left empty is re-seeded with the point farthest from its own center
// (choosing the lowest index on ties) when that distance is positive;
// clusters that stay empty are dropped and labels are compacted, so the
// returned r can be smaller than requested on degenerate data.
ClusterAssignment kmeans_cluster(const Mat& features, int r, KmeansInit init,
                                 std::uint64_t seed = 0, int max_iter = 100);

struct FcmResult {
  Membership membership;  // n x r
  Mat centers;            // r x dim
  std::vector<double> objective;  // J_m after each iteration
};

// Fuzzy C-means with fuzzifier m. Centers start at the first r distinct
// rows. A point coinciding with a center gets membership 1 there (lowest
// such center on ties). Stops when no membership moves more than tol.
FcmResult fcm_cluster(const Mat& features, int r, double m = 2.0, double tol = 1e-6,
                      int max_iter = 200);

// Hard labels from a membership matrix (argmax per row, lowest index on
// ties); empty clusters are dropped and labels compacted.
ClusterAssignment harden_membership(const Membership& ms);

// Per-layer cluster budgets r_l summing to ceil(keep_ratio * total slots):
// every expert is ranked by calibration frequency globally and each layer's
// budget is its share of the top of that ranking. Layers ranked out of the
// budget get r_l = 1, with the surplus removed from the largest-budget
// layer (lowest index on ties) while it has more than one.
std::vector<int> non_uniform_budgets(const CalibrationStats& stats, double keep_ratio);

}  // namespace moekit
