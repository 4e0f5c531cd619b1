#pragma once

#include <string>
#include <vector>

#include "moekit/calibration.hpp"
#include "moekit/clustering.hpp"
#include "moekit/model.hpp"

namespace moekit {

enum class MergeStrategy { Average, Frequency, FixDom };

const char* merge_strategy_name(MergeStrategy s);

enum class FixDomFeatures { Activation, Weight, ActivationWeight };

const char* fixdom_features_name(FixDomFeatures f);

struct ClusterPlan {
  std::vector<int> members;     // expert slots, ascending
  std::vector<double> alphas;   // convex weights, same order as members
  int dominant = -1;            // member slot owning the dimension order (FixDom)
};

struct LayerPlan {
  std::vector<int> labels;            // slot -> cluster
  std::vector<ClusterPlan> clusters;  // cluster id order
};

struct MergePlan {
  MergeStrategy strategy = MergeStrategy::Average;
  FixDomFeatures fixdom_features = FixDomFeatures::Activation;
  std::vector<LayerPlan> layers;
};

// Convex combination weights for one cluster. Average ignores frequencies;
// Frequency weighs by f_j and falls back to average when they sum to zero.
std::vector<double> build_alphas(const std::vector<int>& members,
                                 const std::vector<std::uint64_t>& frequency,
                                 MergeStrategy strategy);

// Alpha-weighted sum of member weights, dimension by dimension.
ExpertWeights merge_linear(const std::vector<const ExpertWeights*>& members,
                           const std::vector<double>& alphas, int d_h, int d_m);

// Fixed-dominant merge: each member column is assigned to the dominant
// expert's most-correlated column (Pearson over the feature rows; zero
// variance gives correlation 0; ties pick the lowest dominant column), then
// every dominant column takes the alpha-weighted mean of the columns
// assigned to it. W_down rows follow the same assignment. features[j] holds
// the column features of members[j] with one column per intermediate dim.
ExpertWeights fixdom_merge(const std::vector<const ExpertWeights*>& members,
                           const std::vector<Mat>& features, int dominant_idx,
                           const std::vector<double>& alphas, int d_h, int d_m);

// Plan construction from per-layer assignments. Frequency alphas and FixDom
// dominants (highest-frequency member, lowest slot on ties) come from stats.
MergePlan build_merge_plan(const MoeModel& m,
                           const std::vector<ClusterAssignment>& assignments,
                           const CalibrationStats* stats, MergeStrategy strategy,
                           FixDomFeatures fixdom_features = FixDomFeatures::Activation);

// Builds the reduced model: per layer, one stored expert per cluster, the
// router untouched, remap sending each slot to its cluster's expert.
// FixDom with activation features requires stats collected with caching.
MoeModel apply_merge_plan(const MoeModel& m, const MergePlan& plan,
                          const CalibrationStats* stats = nullptr);

}  // namespace moekit
