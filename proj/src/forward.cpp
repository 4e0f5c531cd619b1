#include "moekit/forward.hpp"

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "moekit/threading.hpp"

namespace moekit {

namespace {

// Per-thread scratch so the per-token hot path never allocates.
struct Scratch {
  std::vector<double> acc_gate, acc_up, acc_out, logits, mix;
  std::vector<float> act, expert_out, logits_f;
};

thread_local Scratch tls;

}  // namespace

void router_logits(const MoeLayer& layer, const float* x, float* logits_out) {
  int n = layer.slots();
  int d_h = layer.router.rows;
  std::vector<double>& acc = tls.logits;
  acc.assign(n, 0.0);
  for (int j = 0; j < d_h; ++j) {
    double xj = x[j];
    const float* wr = layer.router.row(j);
    for (int i = 0; i < n; ++i) acc[i] += xj * wr[i];
  }
  for (int i = 0; i < n; ++i) logits_out[i] = static_cast<float>(acc[i]);
}

Routing route_from_logits(const float* logits, int n, int k) {
  if (k < 1 || k > n)
    fail(ErrorCode::Config, "top-k " + std::to_string(k) + " out of range for n=" + std::to_string(n));
  std::vector<char> picked(n, 0);
  // Repeated max scans; strict comparison keeps the lowest index on ties.
  for (int t = 0; t < k; ++t) {
    int best = -1;
    float best_logit = 0.0f;
    for (int i = 0; i < n; ++i) {
      if (picked[i]) continue;
      if (best < 0 || logits[i] > best_logit) {
        best = i;
        best_logit = logits[i];
      }
    }
    picked[best] = 1;
  }
  Routing r;
  r.slots.reserve(k);
  r.probs.reserve(k);
  double max_logit = 0.0;
  bool first = true;
  for (int i = 0; i < n; ++i) {
    if (!picked[i]) continue;
    r.slots.push_back(i);
    if (first || logits[i] > max_logit) max_logit = logits[i];
    first = false;
  }
  double denom = 0.0;
  std::vector<double> e(k);
  for (int t = 0; t < k; ++t) {
    e[t] = std::exp(static_cast<double>(logits[r.slots[t]]) - max_logit);
    denom += e[t];
  }
  for (int t = 0; t < k; ++t) r.probs.push_back(static_cast<float>(e[t] / denom));
  return r;
}

Routing route(const MoeLayer& layer, const float* x) {
  int n = layer.slots();
  std::vector<float>& logits = tls.logits_f;
  logits.resize(n);
  router_logits(layer, x, logits.data());
  return route_from_logits(logits.data(), n, layer.k);
}

void expert_forward(const ExpertWeights& e, const float* x, int d_h, int d_m,
                    float* y_out, float* intermediate) {
  std::vector<double>& g = tls.acc_gate;
  std::vector<double>& u = tls.acc_up;
  std::vector<double>& o = tls.acc_out;
  g.assign(d_m, 0.0);
  u.assign(d_m, 0.0);
  for (int j = 0; j < d_h; ++j) {
    double xj = x[j];
    const float* wg = e.w_gate.row(j);
    const float* wu = e.w_up.row(j);
    for (int p = 0; p < d_m; ++p) {
      g[p] += xj * wg[p];
      u[p] += xj * wu[p];
    }
  }
  std::vector<float>& act = tls.act;
  act.resize(d_m);
  for (int p = 0; p < d_m; ++p) {
    float z = static_cast<float>(g[p]);
    act[p] = silu(z) * static_cast<float>(u[p]);
  }
  if (intermediate) std::memcpy(intermediate, act.data(), sizeof(float) * d_m);
  o.assign(d_h, 0.0);
  for (int p = 0; p < d_m; ++p) {
    double ap = act[p];
    const float* wd = e.w_down.row(p);
    for (int q = 0; q < d_h; ++q) o[q] += ap * wd[q];
  }
  for (int q = 0; q < d_h; ++q) y_out[q] = static_cast<float>(o[q]);
}

void smoe_forward(const MoeLayer& layer, int d_h, int d_m, const float* x, float* y_out) {
  Routing r = route(layer, x);
  // Slots sharing a stored expert combine their weights before the expert
  // runs, so the output is identical however many slots point at it.
  int k = static_cast<int>(r.slots.size());
  int uniq[64];
  double w[64];
  std::vector<int> uniq_heap;
  std::vector<double> w_heap;
  int* ue = uniq;
  double* uw = w;
  if (k > 64) {
    uniq_heap.resize(k);
    w_heap.resize(k);
    ue = uniq_heap.data();
    uw = w_heap.data();
  }
  int m = 0;
  for (int t = 0; t < k; ++t) {
    int stored = layer.remap[r.slots[t]];
    int at = -1;
    for (int s = 0; s < m; ++s)
      if (ue[s] == stored) { at = s; break; }
    if (at < 0) {
      ue[m] = stored;
      uw[m] = r.probs[t];
      ++m;
    } else {
      uw[at] += r.probs[t];
    }
  }
  std::vector<double>& acc = tls.mix;
  acc.assign(d_h, 0.0);
  std::vector<float>& out = tls.expert_out;
  out.resize(d_h);
  for (int s = 0; s < m; ++s) {
    expert_forward(layer.experts[ue[s]], x, d_h, d_m, out.data());
    double ws = uw[s];
    for (int q = 0; q < d_h; ++q) acc[q] += ws * out[q];
  }
  for (int q = 0; q < d_h; ++q) y_out[q] = static_cast<float>(acc[q]);
}

Mat model_forward(const MoeModel& m, const TokenBatch& batch) {
  if (batch.x.cols != m.d_h && !m.layers.empty())
    fail(ErrorCode::Dimension, "batch width " + std::to_string(batch.x.cols) +
                                   " does not match model d_h " + std::to_string(m.d_h));
  Mat cur = batch.x;
  int tokens = cur.rows;
  for (const MoeLayer& layer : m.layers) {
    Mat next(tokens, m.d_h);
#pragma omp parallel for num_threads(thread_cap()) schedule(static)
    for (int t = 0; t < tokens; ++t) smoe_forward(layer, m.d_h, m.d_m, cur.row(t), next.row(t));
    cur = std::move(next);
  }
  return cur;
}

}  // namespace moekit
