#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moekit/model.hpp"

namespace moekit {

// Planted-redundancy model description. Each layer draws g base experts and
// n members; member i perturbs base (i mod g) entrywise by (1 + sigma * eps).
struct PlantedSpec {
  int layers = 4;
  int experts = 16;   // n
  int groups = 4;     // g
  int d_h = 32;
  int d_m = 64;
  int top_k = 2;
  double sigma = 0.01;
  std::uint64_t seed = 1;
  int tokens = 512;   // default calibration batch size for gen_batch
};

// Parses KEY=VALUE lines ('#' starts a comment). Unknown keys are rejected.
PlantedSpec parse_planted_spec(const std::string& text);
PlantedSpec load_planted_spec(const std::string& path);

// Ground-truth group of expert i (identical across layers).
inline int planted_group(const PlantedSpec& spec, int expert) { return expert % spec.groups; }
std::vector<int> planted_labels(const PlantedSpec& spec);

// Base and member entries are standard normal scaled by 1/sqrt(d_h), the
// router is an independent standard-normal matrix with the same scaling.
// sigma = 0 makes members bitwise copies of their base.
MoeModel gen_planted_model(const PlantedSpec& spec);

// T x d_h standard-normal token batch from the spec seed.
TokenBatch gen_batch(const PlantedSpec& spec, int tokens);

}  // namespace moekit
