#include "moekit/model.hpp"

#include <string>

namespace moekit {

void validate_layer(const MoeLayer& layer, int d_h, int d_m) {
  int n = layer.slots();
  if (n <= 0) fail(ErrorCode::Config, "layer has no routing slots");
  if (layer.stored() <= 0) fail(ErrorCode::Config, "layer has no stored experts");
  if (layer.stored() > n) fail(ErrorCode::Config, "more stored experts than routing slots");
  if (layer.k < 1 || layer.k > n)
    fail(ErrorCode::Config, "top-k " + std::to_string(layer.k) + " out of range for n=" + std::to_string(n));
  require_shape(layer.router, d_h, n, "router");
  for (std::int32_t s : layer.remap)
    if (s < 0 || s >= layer.stored())
      fail(ErrorCode::Config, "remap entry " + std::to_string(s) + " out of range");
  for (const ExpertWeights& e : layer.experts) {
    require_shape(e.w_gate, d_h, d_m, "w_gate");
    require_shape(e.w_up, d_h, d_m, "w_up");
    require_shape(e.w_down, d_m, d_h, "w_down");
  }
}

void validate_model(const MoeModel& m, bool check_finite) {
  if (m.d_h <= 0 || m.d_m <= 0) fail(ErrorCode::Config, "model dimensions must be positive");
  for (const MoeLayer& layer : m.layers) {
    validate_layer(layer, m.d_h, m.d_m);
    if (!check_finite) continue;
    if (!all_finite(layer.router)) fail(ErrorCode::Config, "non-finite router weights");
    for (const ExpertWeights& e : layer.experts)
      if (!all_finite(e.w_gate) || !all_finite(e.w_up) || !all_finite(e.w_down))
        fail(ErrorCode::Config, "non-finite expert weights");
  }
}

}  // namespace moekit
