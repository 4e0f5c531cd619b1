#include "moekit/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "moekit/rng.hpp"
#include "moekit/threading.hpp"

namespace moekit {

const char* feature_kind_name(FeatureKind k) {
  switch (k) {
    case FeatureKind::ExpertOutput: return "expert-output";
    case FeatureKind::RouterWeightColumn: return "router-weight-column";
    case FeatureKind::RouterLogitProfile: return "router-logit-profile";
    case FeatureKind::Weight: return "weight";
  }
  return "?";
}

const char* linkage_name(Linkage l) {
  switch (l) {
    case Linkage::Single: return "single";
    case Linkage::Complete: return "complete";
    case Linkage::Average: return "average";
  }
  return "?";
}

FeatureMatrix expert_output_features(const CalibrationStats& stats, int layer) {
  if (layer < 0 || layer >= static_cast<int>(stats.layers.size()))
    fail(ErrorCode::Argument, "layer index out of range");
  return {stats.layers[layer].mean_output, FeatureKind::ExpertOutput};
}

FeatureMatrix router_weight_column_features(const MoeModel& m, int layer) {
  if (layer < 0 || layer >= static_cast<int>(m.layers.size()))
    fail(ErrorCode::Argument, "layer index out of range");
  const Mat& r = m.layers[layer].router;
  Mat f(r.cols, r.rows);
  for (int i = 0; i < r.cols; ++i)
    for (int j = 0; j < r.rows; ++j) f.at(i, j) = r.at(j, i);
  return {std::move(f), FeatureKind::RouterWeightColumn};
}

FeatureMatrix router_logit_profile_features(const CalibrationStats& stats, int layer) {
  if (layer < 0 || layer >= static_cast<int>(stats.layers.size()))
    fail(ErrorCode::Argument, "layer index out of range");
  return {stats.layers[layer].mean_selected_logits, FeatureKind::RouterLogitProfile};
}

FeatureMatrix weight_features(const MoeModel& m, int layer) {
  if (layer < 0 || layer >= static_cast<int>(m.layers.size()))
    fail(ErrorCode::Argument, "layer index out of range");
  const MoeLayer& l = m.layers[layer];
  int n = l.slots();
  size_t per = l.experts[0].w_gate.size();
  Mat f(n, static_cast<int>(3 * per));
  for (int i = 0; i < n; ++i) {
    const ExpertWeights& e = l.experts[l.remap[i]];
    float* dst = f.row(i);
    std::copy(e.w_gate.data.begin(), e.w_gate.data.end(), dst);
    std::copy(e.w_up.data.begin(), e.w_up.data.end(), dst + per);
    std::copy(e.w_down.data.begin(), e.w_down.data.end(), dst + 2 * per);
  }
  return {std::move(f), FeatureKind::Weight};
}

DistMatrix distance_matrix(const Mat& features) {
  if (!all_finite(features)) fail(ErrorCode::Argument, "non-finite feature entries");
  int n = features.rows;
  DistMatrix d(n);
#pragma omp parallel for num_threads(thread_cap()) schedule(static)
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      double s = 0.0;
      const float* a = features.row(i);
      const float* b = features.row(j);
      for (int c = 0; c < features.cols; ++c) {
        double diff = static_cast<double>(a[c]) - static_cast<double>(b[c]);
        s += diff * diff;
      }
      double dist = std::sqrt(s);
      d.at(i, j) = dist;
      d.at(j, i) = dist;
    }
  }
  return d;
}

std::vector<std::vector<int>> cluster_members(const ClusterAssignment& a) {
  std::vector<std::vector<int>> out(a.r);
  for (int i = 0; i < static_cast<int>(a.labels.size()); ++i) out[a.labels[i]].push_back(i);
  return out;
}

namespace {

double linkage_distance(const DistMatrix& base, const std::vector<int>& a,
                        const std::vector<int>& b, Linkage linkage) {
  double best = linkage == Linkage::Single ? std::numeric_limits<double>::infinity() : 0.0;
  double sum = 0.0;
  for (int i : a)
    for (int j : b) {
      double d = base.at(i, j);
      switch (linkage) {
        case Linkage::Single: best = std::min(best, d); break;
        case Linkage::Complete: best = std::max(best, d); break;
        case Linkage::Average: sum += d; break;
      }
    }
  if (linkage == Linkage::Average) return sum / (static_cast<double>(a.size()) * b.size());
  return best;
}

}  // namespace

ClusterAssignment hierarchical_cluster(const DistMatrix& dist, int r, Linkage linkage) {
  int n = dist.n;
  if (n <= 0) fail(ErrorCode::Argument, "empty distance matrix");
  if (r < 1 || r > n) fail(ErrorCode::Argument, "cluster count out of range");

  // Active clusters carry their member sets; a cluster's id is its smallest
  // member index, which stays stable across merges.
  std::vector<std::vector<int>> members(n);
  for (int i = 0; i < n; ++i) members[i] = {i};
  std::vector<int> active(n);
  std::iota(active.begin(), active.end(), 0);

  ClusterAssignment out;
  while (static_cast<int>(active.size()) > r) {
    double best = std::numeric_limits<double>::infinity();
    int bi = -1, bj = -1;
    // Pairs scanned in lexicographic id order; strict < keeps the first
    // minimal pair, which is the tie-break rule.
    for (size_t ai = 0; ai < active.size(); ++ai)
      for (size_t aj = ai + 1; aj < active.size(); ++aj) {
        int a = active[ai], b = active[aj];
        double d = linkage_distance(dist, members[a], members[b], linkage);
        if (d < best) {
          best = d;
          bi = a;
          bj = b;
        }
      }
    out.merge_trace.push_back({bi, bj, best});
    members[bi].insert(members[bi].end(), members[bj].begin(), members[bj].end());
    std::sort(members[bi].begin(), members[bi].end());
    members[bj].clear();
    active.erase(std::find(active.begin(), active.end(), bj));
  }

  out.r = static_cast<int>(active.size());
  out.labels.assign(n, -1);
  // `active` stays sorted by id, so labels follow smallest-member order.
  for (int c = 0; c < out.r; ++c)
    for (int i : members[active[c]]) out.labels[i] = c;
  return out;
}

ClusterAssignment kmeans_cluster(const Mat& features, int r, KmeansInit init,
                                 std::uint64_t seed, int max_iter) {
  int n = features.rows;
  int dim = features.cols;
  if (n <= 0) fail(ErrorCode::Argument, "empty feature matrix");
  if (r < 1 || r > n) fail(ErrorCode::Argument, "cluster count out of range");

  Mat centers(r, dim);
  if (init == KmeansInit::FixedFirstR) {
    for (int c = 0; c < r; ++c) std::copy(features.row(c), features.row(c) + dim, centers.row(c));
  } else {
    // r distinct row indices drawn without replacement.
    Rng rng(seed, 0x6B6D65616E73ULL);
    std::vector<int> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    for (int c = 0; c < r; ++c) {
      int pick = c + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n - c)));
      std::swap(pool[c], pool[pick]);
      std::copy(features.row(pool[c]), features.row(pool[c]) + dim, centers.row(c));
    }
  }

  auto dist2 = [&](const float* p, const float* c) {
    double s = 0.0;
    for (int j = 0; j < dim; ++j) {
      double d = static_cast<double>(p[j]) - static_cast<double>(c[j]);
      s += d * d;
    }
    return s;
  };

  std::vector<int> labels(n, 0);
  std::vector<int> counts(r, 0);
  for (int iter = 0; iter < max_iter; ++iter) {
    bool changed = iter == 0;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double bd = dist2(features.row(i), centers.row(0));
      for (int c = 1; c < r; ++c) {
        double d = dist2(features.row(i), centers.row(c));
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (labels[i] != best) changed = true;
      labels[i] = best;
    }

    counts.assign(r, 0);
    for (int l : labels) counts[l] += 1;

    // Empty-cluster repair: reseed with the farthest point whose cluster
    // can spare it, lowest index on distance ties; skipped when every
    // distance is zero (degenerate identical points).
    for (int c = 0; c < r; ++c) {
      if (counts[c] > 0) continue;
      int far = -1;
      double fd = 0.0;
      for (int i = 0; i < n; ++i) {
        if (counts[labels[i]] <= 1) continue;
        double d = dist2(features.row(i), centers.row(labels[i]));
        if (d > fd) {
          fd = d;
          far = i;
        }
      }
      if (far < 0) continue;
      counts[labels[far]] -= 1;
      labels[far] = c;
      counts[c] = 1;
      changed = true;
    }

    for (int c = 0; c < r; ++c) {
      if (counts[c] == 0) continue;
      std::vector<double> acc(dim, 0.0);
      for (int i = 0; i < n; ++i) {
        if (labels[i] != c) continue;
        const float* p = features.row(i);
        for (int j = 0; j < dim; ++j) acc[j] += p[j];
      }
      float* dst = centers.row(c);
      for (int j = 0; j < dim; ++j) dst[j] = static_cast<float>(acc[j] / counts[c]);
    }
    if (!changed) break;
  }

  // Compact away clusters that stayed empty (possible only on degenerate
  // data); labels then stay surjective onto 0..r'-1.
  std::vector<int> relabel(r, -1);
  int next = 0;
  for (int i = 0; i < n; ++i) {
    if (relabel[labels[i]] < 0) relabel[labels[i]] = -2;  // mark used
  }
  for (int c = 0; c < r; ++c)
    if (relabel[c] == -2) relabel[c] = next++;
  ClusterAssignment out;
  out.r = next;
  out.labels.resize(n);
  for (int i = 0; i < n; ++i) out.labels[i] = relabel[labels[i]];
  return out;
}

FcmResult fcm_cluster(const Mat& features, int r, double m, double tol, int max_iter) {
  int n = features.rows;
  int dim = features.cols;
  if (n <= 0) fail(ErrorCode::Argument, "empty feature matrix");
  if (r < 1 || r > n) fail(ErrorCode::Argument, "cluster count out of range");
  if (m <= 1.0) fail(ErrorCode::Argument, "fuzzifier must exceed 1");

  FcmResult res;
  res.centers = Mat(r, dim);
  res.membership.u = Mat(n, r);

  // Centers start at the first r pairwise-distinct rows, falling back to
  // the first r rows when the data has fewer distinct points.
  {
    std::vector<int> chosen;
    for (int i = 0; i < n && static_cast<int>(chosen.size()) < r; ++i) {
      bool dup = false;
      for (int c : chosen) {
        bool same = true;
        for (int j = 0; j < dim; ++j)
          if (features.at(i, j) != features.at(c, j)) {
            same = false;
            break;
          }
        if (same) {
          dup = true;
          break;
        }
      }
      if (!dup) chosen.push_back(i);
    }
    while (static_cast<int>(chosen.size()) < r) chosen.push_back(static_cast<int>(chosen.size()));
    for (int c = 0; c < r; ++c)
      std::copy(features.row(chosen[c]), features.row(chosen[c]) + dim, res.centers.row(c));
  }

  double exponent = 2.0 / (m - 1.0);
  Mat& u = res.membership.u;
  Mat prev_u(n, r);
  std::vector<double> d(r);

  for (int iter = 0; iter < max_iter; ++iter) {
    // Membership update from current centers.
    for (int i = 0; i < n; ++i) {
      int zero_at = -1;
      for (int c = 0; c < r; ++c) {
        double s = 0.0;
        for (int j = 0; j < dim; ++j) {
          double diff = static_cast<double>(features.at(i, j)) - static_cast<double>(res.centers.at(c, j));
          s += diff * diff;
        }
        d[c] = std::sqrt(s);
        if (d[c] == 0.0 && zero_at < 0) zero_at = c;
      }
      if (zero_at >= 0) {
        // Coincident with a center: full membership there (limit).
        for (int c = 0; c < r; ++c) u.at(i, c) = c == zero_at ? 1.0f : 0.0f;
        continue;
      }
      for (int c = 0; c < r; ++c) {
        double s = 0.0;
        for (int c2 = 0; c2 < r; ++c2) s += std::pow(d[c] / d[c2], exponent);
        u.at(i, c) = static_cast<float>(1.0 / s);
      }
    }

    // Center update from memberships.
    for (int c = 0; c < r; ++c) {
      std::vector<double> acc(dim, 0.0);
      double wsum = 0.0;
      for (int i = 0; i < n; ++i) {
        double w = std::pow(static_cast<double>(u.at(i, c)), m);
        wsum += w;
        const float* p = features.row(i);
        for (int j = 0; j < dim; ++j) acc[j] += w * p[j];
      }
      if (wsum > 0.0) {
        float* dst = res.centers.row(c);
        for (int j = 0; j < dim; ++j) dst[j] = static_cast<float>(acc[j] / wsum);
      }
    }

    // Objective J_m after the full iteration.
    double obj = 0.0;
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < r; ++c) {
        double s = 0.0;
        for (int j = 0; j < dim; ++j) {
          double diff = static_cast<double>(features.at(i, j)) - static_cast<double>(res.centers.at(c, j));
          s += diff * diff;
        }
        obj += std::pow(static_cast<double>(u.at(i, c)), m) * s;
      }
    res.objective.push_back(obj);

    double delta = 0.0;
    if (iter > 0)
      for (size_t z = 0; z < u.data.size(); ++z)
        delta = std::max(delta, std::abs(static_cast<double>(u.data[z]) - prev_u.data[z]));
    prev_u = u;
    if (iter > 0 && delta < tol) break;
  }
  return res;
}

ClusterAssignment harden_membership(const Membership& ms) {
  const Mat& u = ms.u;
  ClusterAssignment out;
  out.labels.resize(u.rows);
  std::vector<int> relabel(u.cols, -1);
  for (int i = 0; i < u.rows; ++i) {
    int best = 0;
    for (int c = 1; c < u.cols; ++c)
      if (u.at(i, c) > u.at(i, best)) best = c;
    out.labels[i] = best;
    relabel[best] = -2;
  }
  int next = 0;
  for (int c = 0; c < u.cols; ++c)
    if (relabel[c] == -2) relabel[c] = next++;
  for (int& l : out.labels) l = relabel[l];
  out.r = next;
  return out;
}

std::vector<int> non_uniform_budgets(const CalibrationStats& stats, double keep_ratio) {
  if (!(keep_ratio > 0.0) || keep_ratio > 1.0)
    fail(ErrorCode::Argument, "keep ratio must lie in (0, 1]");
  int layers = static_cast<int>(stats.layers.size());
  if (layers == 0) fail(ErrorCode::Argument, "no layer statistics");

  std::uint64_t total = 0;
  struct Entry {
    std::uint64_t freq;
    int layer;
    int slot;
  };
  std::vector<Entry> entries;
  for (int l = 0; l < layers; ++l) {
    total += stats.layers[l].n;
    for (int i = 0; i < stats.layers[l].n; ++i)
      entries.push_back({stats.layers[l].frequency[i], l, i});
  }
  std::uint64_t budget =
      static_cast<std::uint64_t>(std::ceil(keep_ratio * static_cast<double>(total)));
  if (budget < 1) budget = 1;

  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.freq != b.freq) return a.freq > b.freq;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.slot < b.slot;
  });

  std::vector<int> r(layers, 0);
  for (std::uint64_t t = 0; t < budget && t < entries.size(); ++t) r[entries[t].layer] += 1;

  // Layers ranked out entirely still keep one expert; the surplus comes out
  // of the largest remaining budget (lowest layer index on ties) while one
  // exists above a single expert.
  for (int l = 0; l < layers; ++l) {
    if (r[l] > 0) continue;
    r[l] = 1;
    int donor = -1;
    for (int d = 0; d < layers; ++d)
      if (r[d] > 1 && (donor < 0 || r[d] > r[donor])) donor = d;
    if (donor >= 0) r[donor] -= 1;
  }
  return r;
}

}  // namespace moekit
