#pragma once

#include <string>

#include "moekit/calibration.hpp"
#include "moekit/model.hpp"

namespace moekit {

// Checkpoint container (.smck): "SMCK" magic, u16 version, u32 L/d_h/d_m,
// per-layer header (u32 n, stored, k, then n u32 remap entries), then per
// layer the router (d_h x n) and each stored expert's W_gate, W_up, W_down,
// all little-endian row-major f32. Loading validates the promised payload
// size against the file before allocating anything.
void save_checkpoint(const MoeModel& m, const std::string& path);
MoeModel load_checkpoint(const std::string& path);

// Token batch container (.f32mat): "F32M" magic, u32 T, u32 d_h, payload
// row-major little-endian f32.
void save_batch(const TokenBatch& b, const std::string& path);
TokenBatch load_batch(const std::string& path);

// Calibration statistics as a schema-versioned JSON document. Activation
// caches are not serialized.
void save_stats(const CalibrationStats& stats, const std::string& path);
CalibrationStats load_stats(const std::string& path);

}  // namespace moekit
