#pragma once

#include <cstdint>
#include <vector>

#include "moekit/model.hpp"

namespace moekit {

inline float silu(float z) { return z / (1.0f + std::exp(-z)); }

// Routing decision for one token: exactly k slots with positive weights
// summing to 1, slots sorted ascending.
struct Routing {
  std::vector<std::int32_t> slots;
  std::vector<float> probs;
};

// Router logits x . W_R for one token, length n.
void router_logits(const MoeLayer& layer, const float* x, float* logits_out);

// Softmax over the k largest logits; ties broken toward the lower slot.
Routing route(const MoeLayer& layer, const float* x);
Routing route_from_logits(const float* logits, int n, int k);

// y = E(x) for one expert; x has length d_h, y is resized to d_h.
// `intermediate`, when non-null, receives silu(x W_gate) * (x W_up) (d_m).
void expert_forward(const ExpertWeights& e, const float* x, int d_h, int d_m,
                    float* y_out, float* intermediate = nullptr);

// y = sum_i P_i(x) E_{remap[i]}(x). Slots routed to the same stored expert
// are grouped first, so their weights combine before the expert evaluates.
void smoe_forward(const MoeLayer& layer, int d_h, int d_m, const float* x, float* y_out);

// Applies layers in order; the output of layer l feeds layer l+1 directly.
// Rows are independent and processed in parallel.
Mat model_forward(const MoeModel& m, const TokenBatch& batch);

}  // namespace moekit
