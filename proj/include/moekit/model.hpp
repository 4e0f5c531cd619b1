#pragma once

#include <cstdint>
#include <vector>

#include "moekit/mat.hpp"

namespace moekit {

// One expert's weights for the gated FFN
//   E(x) = (silu(x W_gate) * (x W_up)) W_down
// with W_gate, W_up of shape d_h x d_m and W_down of shape d_m x d_h.
struct ExpertWeights {
  Mat w_gate;
  Mat w_up;
  Mat w_down;
};

// One SMoE layer. `router` has one column per routing slot. `remap` sends a
// routing slot to a stored expert; an unmerged layer has remap[i] == i and
// one stored expert per slot, a merged layer has fewer stored experts than
// slots. `k` experts are activated per token.
struct MoeLayer {
  Mat router;  // d_h x n
  std::vector<ExpertWeights> experts;
  std::vector<std::int32_t> remap;  // size n, values in [0, experts.size())
  int k = 1;

  int slots() const { return static_cast<int>(remap.size()); }
  int stored() const { return static_cast<int>(experts.size()); }
};

struct MoeModel {
  int d_h = 0;
  int d_m = 0;
  std::vector<MoeLayer> layers;
};

// T tokens of dimension d_h, one per row.
struct TokenBatch {
  Mat x;  // T x d_h
  int tokens() const { return x.rows; }
};

// Shape/config validation. `validate_model` additionally rejects non-finite
// weights; forward ops only check shapes.
void validate_layer(const MoeLayer& layer, int d_h, int d_m);
void validate_model(const MoeModel& m, bool check_finite = true);

}  // namespace moekit
