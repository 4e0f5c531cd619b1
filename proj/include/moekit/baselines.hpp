#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "moekit/calibration.hpp"
#include "moekit/clustering.hpp"
#include "moekit/model.hpp"

namespace moekit {

enum class PruneMethod { Frequency, Score, Output, OutputSampled, MSmoe };

const char* prune_method_name(PruneMethod m);

struct LayerPrune {
  std::vector<int> kept;  // ascending slot indices
  double objective = 0.0; // deviation achieved (output-based methods only)
};

struct PruneResult {
  PruneMethod method = PruneMethod::Frequency;
  std::vector<LayerPrune> layers;
};

// Keeps the ceil(keep_ratio * total)-top experts of a global frequency
// ranking (ties toward lower layer, then lower slot), at least one per
// layer; the clamp surplus comes out of the layer keeping the most.
// keep_ratio must lie in (0, 1).
PruneResult f_prune(const CalibrationStats& stats, double keep_ratio);

// Same ranking over accumulated router scores s_i.
PruneResult s_prune(const CalibrationStats& stats, double keep_ratio);

struct OPruneOptions {
  int keep = 1;                   // survivors per layer
  bool sampled = false;           // sample candidate subsets instead of enumerating
  std::uint64_t samples = 0;      // distinct subsets to draw when sampled
  std::uint64_t seed = 0;
  bool end_to_end = false;        // objective at the final model output
  std::uint64_t enumeration_limit = 1000000;  // guard for exhaustive mode
  bool keep_enumeration = false;  // retain every (subset, objective) pair
};

struct OPruneDebug {
  // Per layer: evaluated subsets in evaluation order with their objectives.
  std::vector<std::vector<std::pair<std::vector<int>, double>>> evaluated;
};

// Output-aware pruning. Layer by layer, picks the survivor subset whose
// rerouted output deviates least from the original layer's output on the
// batch (sum over tokens of the per-token L2 deviation). Inputs to every
// layer come from the original model. Exhaustive mode enumerates all
// C(n, keep) subsets and refuses to go past the enumeration limit; sampled
// mode draws distinct subsets uniformly and collapses to exhaustive when
// samples >= C(n, keep). Ties pick the lexicographically smallest subset.
PruneResult o_prune(const MoeModel& m, const TokenBatch& batch, const OPruneOptions& opts,
                    OPruneDebug* debug = nullptr);

// One-shot grouping: the r most frequent experts seed the clusters, every
// other expert joins the seed nearest in router-feature space. No
// re-centering pass.
std::vector<ClusterAssignment> msmoe_group(const MoeModel& m, const CalibrationStats& stats,
                                           int r, FeatureKind router_feature = FeatureKind::RouterWeightColumn);

// Removes pruned experts and their router columns; k is clamped to the
// survivor count. Routing renormalizes implicitly over the survivors.
MoeModel apply_prune(const MoeModel& m, const PruneResult& result);
MoeLayer prune_layer(const MoeLayer& layer, const std::vector<int>& kept);

// C(n, k) guarded against u64 overflow (returns nullopt past the cap).
std::optional<std::uint64_t> binomial(int n, int k, std::uint64_t cap = ~0ULL);

}  // namespace moekit
