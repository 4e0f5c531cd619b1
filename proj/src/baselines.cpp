#include "moekit/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>

#include "moekit/forward.hpp"
#include "moekit/rng.hpp"
#include "moekit/threading.hpp"

namespace moekit {

const char* prune_method_name(PruneMethod m) {
  switch (m) {
    case PruneMethod::Frequency: return "f-prune";
    case PruneMethod::Score: return "s-prune";
    case PruneMethod::Output: return "o-prune";
    case PruneMethod::OutputSampled: return "o-prune-sampled";
    case PruneMethod::MSmoe: return "m-smoe";
  }
  return "?";
}

std::optional<std::uint64_t> binomial(int n, int k, std::uint64_t cap) {
  if (k < 0 || k > n) return 0;
  if (k > n - k) k = n - k;
  std::uint64_t c = 1;
  for (int i = 1; i <= k; ++i) {
    std::uint64_t num = static_cast<std::uint64_t>(n - k + i);
    if (c > cap / num) return std::nullopt;  // would overflow past the cap
    c = c * num / i;
    if (c > cap) return std::nullopt;
  }
  return c;
}

namespace {

// Global keep-top ranking shared by f_prune and s_prune. Scores compare
// exactly; ties prefer the lower layer, then the lower slot.
PruneResult rank_prune(const CalibrationStats& stats, double keep_ratio,
                       const std::vector<std::vector<double>>& scores, PruneMethod method) {
  if (!(keep_ratio > 0.0) || keep_ratio >= 1.0)
    fail(ErrorCode::Argument, "keep ratio must lie in (0, 1)");
  int layers = static_cast<int>(stats.layers.size());
  if (layers == 0) fail(ErrorCode::Argument, "no layer statistics");

  struct Entry {
    double score;
    int layer;
    int slot;
  };
  std::vector<Entry> entries;
  std::uint64_t total = 0;
  for (int l = 0; l < layers; ++l) {
    total += stats.layers[l].n;
    for (int i = 0; i < stats.layers[l].n; ++i) entries.push_back({scores[l][i], l, i});
  }
  std::uint64_t budget =
      static_cast<std::uint64_t>(std::ceil(keep_ratio * static_cast<double>(total)));
  if (budget < 1) budget = 1;

  std::vector<Entry> order = entries;
  std::sort(order.begin(), order.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.slot < b.slot;
  });

  std::vector<std::vector<int>> kept(layers);
  for (std::uint64_t t = 0; t < budget && t < order.size(); ++t)
    kept[order[t].layer].push_back(order[t].slot);

  // Clamp: every layer keeps at least one expert; the surplus comes out of
  // the layer keeping the most (lowest index on ties), dropping its
  // lowest-scored survivor (highest slot on ties).
  for (int l = 0; l < layers; ++l) {
    if (!kept[l].empty()) continue;
    int best = 0;
    for (int i = 1; i < stats.layers[l].n; ++i)
      if (scores[l][i] > scores[l][best]) best = i;
    kept[l].push_back(best);
    int donor = -1;
    for (int d = 0; d < layers; ++d)
      if (static_cast<int>(kept[d].size()) > 1 &&
          (donor < 0 || kept[d].size() > kept[donor].size()))
        donor = d;
    if (donor >= 0) {
      int worst = 0;
      for (size_t s = 1; s < kept[donor].size(); ++s) {
        int a = kept[donor][s], b = kept[donor][worst];
        if (scores[donor][a] < scores[donor][b] ||
            (scores[donor][a] == scores[donor][b] && a > b))
          worst = static_cast<int>(s);
      }
      kept[donor].erase(kept[donor].begin() + worst);
    }
  }

  PruneResult res;
  res.method = method;
  for (int l = 0; l < layers; ++l) {
    std::sort(kept[l].begin(), kept[l].end());
    res.layers.push_back({kept[l], 0.0});
  }
  return res;
}

}  // namespace

PruneResult f_prune(const CalibrationStats& stats, double keep_ratio) {
  std::vector<std::vector<double>> scores;
  for (const LayerStats& ls : stats.layers) {
    std::vector<double> s(ls.n);
    for (int i = 0; i < ls.n; ++i) s[i] = static_cast<double>(ls.frequency[i]);
    scores.push_back(std::move(s));
  }
  return rank_prune(stats, keep_ratio, scores, PruneMethod::Frequency);
}

PruneResult s_prune(const CalibrationStats& stats, double keep_ratio) {
  std::vector<std::vector<double>> scores;
  for (const LayerStats& ls : stats.layers) scores.push_back(ls.router_score);
  return rank_prune(stats, keep_ratio, scores, PruneMethod::Score);
}

MoeLayer prune_layer(const MoeLayer& layer, const std::vector<int>& kept) {
  int n = layer.slots();
  if (kept.empty()) fail(ErrorCode::Argument, "cannot prune every expert of a layer");
  for (size_t s = 0; s < kept.size(); ++s) {
    if (kept[s] < 0 || kept[s] >= n) fail(ErrorCode::Argument, "kept slot out of range");
    if (s > 0 && kept[s] <= kept[s - 1]) fail(ErrorCode::Argument, "kept slots must ascend");
  }
  MoeLayer out;
  int m = static_cast<int>(kept.size());
  out.router = Mat(layer.router.rows, m);
  for (int j = 0; j < layer.router.rows; ++j)
    for (int s = 0; s < m; ++s) out.router.at(j, s) = layer.router.at(j, kept[s]);
  out.k = std::min(layer.k, m);
  out.remap.resize(m);
  for (int s = 0; s < m; ++s) {
    out.remap[s] = s;
    out.experts.push_back(layer.experts[layer.remap[kept[s]]]);
  }
  return out;
}

MoeModel apply_prune(const MoeModel& m, const PruneResult& result) {
  if (result.layers.size() != m.layers.size())
    fail(ErrorCode::Argument, "prune result layer count does not match model");
  MoeModel out;
  out.d_h = m.d_h;
  out.d_m = m.d_m;
  for (size_t l = 0; l < m.layers.size(); ++l)
    out.layers.push_back(prune_layer(m.layers[l], result.layers[l].kept));
  return out;
}

namespace {

std::vector<std::vector<int>> enumerate_subsets(int n, int k) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur(k);
  for (int i = 0; i < k; ++i) cur[i] = i;
  for (;;) {
    out.push_back(cur);
    int i = k - 1;
    while (i >= 0 && cur[i] == n - k + i) --i;
    if (i < 0) break;
    cur[i] += 1;
    for (int j = i + 1; j < k; ++j) cur[j] = cur[j - 1] + 1;
  }
  return out;
}

double layer_objective(const MoeLayer& orig, const MoeLayer& candidate, int d_h, int d_m,
                       const Mat& inputs, const Mat& orig_out) {
  double total = 0.0;
  std::vector<float> y(d_h);
  for (int t = 0; t < inputs.rows; ++t) {
    smoe_forward(candidate, d_h, d_m, inputs.row(t), y.data());
    const float* ref = orig_out.row(t);
    double s = 0.0;
    for (int q = 0; q < d_h; ++q) {
      double diff = static_cast<double>(ref[q]) - static_cast<double>(y[q]);
      s += diff * diff;
    }
    total += std::sqrt(s);
  }
  (void)orig;
  return total;
}

}  // namespace

PruneResult o_prune(const MoeModel& m, const TokenBatch& batch, const OPruneOptions& opts,
                    OPruneDebug* debug) {
  validate_model(m, false);
  if (batch.tokens() <= 0) fail(ErrorCode::Argument, "empty batch");
  int keep = opts.keep;

  // Original per-layer inputs and outputs.
  int layers = static_cast<int>(m.layers.size());
  std::vector<Mat> inputs(layers), outputs(layers);
  {
    Mat cur = batch.x;
    for (int l = 0; l < layers; ++l) {
      inputs[l] = cur;
      Mat next(cur.rows, m.d_h);
#pragma omp parallel for num_threads(thread_cap()) schedule(static)
      for (int t = 0; t < cur.rows; ++t)
        smoe_forward(m.layers[l], m.d_h, m.d_m, cur.row(t), next.row(t));
      outputs[l] = next;
      cur = std::move(next);
    }
  }

  Mat orig_final = outputs.empty() ? batch.x : outputs.back();

  PruneResult res;
  res.method = opts.sampled ? PruneMethod::OutputSampled : PruneMethod::Output;
  if (debug) debug->evaluated.assign(layers, {});

  std::vector<std::vector<int>> chosen;  // survivors of already-decided layers
  for (int l = 0; l < layers; ++l) {
    int n = m.layers[l].slots();
    if (keep < 1 || keep > n) fail(ErrorCode::Argument, "survivor count out of range");

    std::optional<std::uint64_t> count = binomial(n, keep, 1ULL << 62);
    if (!count) fail(ErrorCode::Guard, "subset count overflows");

    std::vector<std::vector<int>> candidates;
    if (!opts.sampled) {
      if (*count > opts.enumeration_limit)
        fail(ErrorCode::Guard, "C(" + std::to_string(n) + ", " + std::to_string(keep) + ") = " +
                                   std::to_string(*count) +
                                   " subsets exceed the exhaustive limit; use sampled mode");
      candidates = enumerate_subsets(n, keep);
    } else {
      std::uint64_t want = opts.samples;
      if (want == 0) fail(ErrorCode::Argument, "sampled mode needs a positive sample count");
      if (want >= *count) {
        if (*count > opts.enumeration_limit)
          fail(ErrorCode::Guard, "sample count covers all subsets but exceeds the exhaustive limit");
        candidates = enumerate_subsets(n, keep);
      } else {
        // Distinct subsets drawn uniformly: partial Fisher-Yates per draw,
        // rejected on repeats.
        Rng rng(opts.seed, 0x6F70727565ULL + static_cast<std::uint64_t>(l));
        std::set<std::vector<int>> seen;
        std::vector<int> pool(n);
        while (seen.size() < want) {
          for (int i = 0; i < n; ++i) pool[i] = i;
          for (int i = 0; i < keep; ++i) {
            int pick = i + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n - i)));
            std::swap(pool[i], pool[pick]);
          }
          std::vector<int> sub(pool.begin(), pool.begin() + keep);
          std::sort(sub.begin(), sub.end());
          seen.insert(std::move(sub));
        }
        candidates.assign(seen.begin(), seen.end());
      }
    }
    // std::set iteration and exhaustive generation are both lexicographic,
    // so a strict < scan below breaks ties toward the smallest subset.

    int cand = static_cast<int>(candidates.size());
    std::vector<double> objective(cand, 0.0);
    if (!opts.end_to_end) {
#pragma omp parallel for num_threads(thread_cap()) schedule(dynamic)
      for (int c = 0; c < cand; ++c) {
        MoeLayer pruned = prune_layer(m.layers[l], candidates[c]);
        objective[c] = layer_objective(m.layers[l], pruned, m.d_h, m.d_m, inputs[l], outputs[l]);
      }
    } else {
      // Final-output deviation with earlier layers already pruned.
#pragma omp parallel for num_threads(thread_cap()) schedule(dynamic)
      for (int c = 0; c < cand; ++c) {
        MoeModel trial;
        trial.d_h = m.d_h;
        trial.d_m = m.d_m;
        for (int l2 = 0; l2 < layers; ++l2) {
          if (l2 < l)
            trial.layers.push_back(prune_layer(m.layers[l2], chosen[l2]));
          else if (l2 == l)
            trial.layers.push_back(prune_layer(m.layers[l2], candidates[c]));
          else
            trial.layers.push_back(m.layers[l2]);
        }
        Mat cur = batch.x;
        for (const MoeLayer& layer : trial.layers) {
          Mat next(cur.rows, m.d_h);
          for (int t = 0; t < cur.rows; ++t)
            smoe_forward(layer, m.d_h, m.d_m, cur.row(t), next.row(t));
          cur = std::move(next);
        }
        double total = 0.0;
        for (int t = 0; t < cur.rows; ++t) {
          double s = 0.0;
          for (int q = 0; q < m.d_h; ++q) {
            double diff = static_cast<double>(orig_final.at(t, q)) - static_cast<double>(cur.at(t, q));
            s += diff * diff;
          }
          total += std::sqrt(s);
        }
        objective[c] = total;
      }
    }

    int best = 0;
    for (int c = 1; c < cand; ++c)
      if (objective[c] < objective[best]) best = c;

    if (debug)
      for (int c = 0; c < cand; ++c) debug->evaluated[l].push_back({candidates[c], objective[c]});

    res.layers.push_back({candidates[best], objective[best]});
    chosen.push_back(candidates[best]);
  }
  return res;
}

std::vector<ClusterAssignment> msmoe_group(const MoeModel& m, const CalibrationStats& stats,
                                           int r, FeatureKind router_feature) {
  if (stats.layers.size() != m.layers.size())
    fail(ErrorCode::Argument, "stats do not match model");
  std::vector<ClusterAssignment> out;
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const LayerStats& ls = stats.layers[l];
    int n = ls.n;
    if (r < 1 || r > n) fail(ErrorCode::Argument, "cluster count out of range");

    // Seeds: the r most frequent experts, lowest slot on frequency ties;
    // cluster ids follow ascending seed slot.
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return ls.frequency[a] > ls.frequency[b];
    });
    std::vector<int> seeds(order.begin(), order.begin() + r);
    std::sort(seeds.begin(), seeds.end());

    FeatureMatrix f;
    switch (router_feature) {
      case FeatureKind::RouterWeightColumn:
        f = router_weight_column_features(m, static_cast<int>(l));
        break;
      case FeatureKind::RouterLogitProfile:
        f = router_logit_profile_features(stats, static_cast<int>(l));
        break;
      default:
        fail(ErrorCode::Argument, "m-smoe grouping expects a router feature kind");
    }

    ClusterAssignment a;
    a.r = r;
    a.labels.assign(n, -1);
    for (int c = 0; c < r; ++c) a.labels[seeds[c]] = c;
    for (int i = 0; i < n; ++i) {
      if (a.labels[i] >= 0) continue;
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < r; ++c) {
        double s = 0.0;
        for (int j = 0; j < f.rows.cols; ++j) {
          double diff = static_cast<double>(f.rows.at(i, j)) - static_cast<double>(f.rows.at(seeds[c], j));
          s += diff * diff;
        }
        if (s < bd) {
          bd = s;
          best = c;
        }
      }
      a.labels[i] = best;
    }
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace moekit
