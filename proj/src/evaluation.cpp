#include "moekit/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "moekit/forward.hpp"
#include "moekit/threading.hpp"

namespace moekit {

namespace {

double pair_distance(const Mat& f, int i, int j, bool cosine) {
  if (!cosine) {
    double s = 0.0;
    for (int c = 0; c < f.cols; ++c) {
      double d = static_cast<double>(f.at(i, c)) - static_cast<double>(f.at(j, c));
      s += d * d;
    }
    return std::sqrt(s);
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int c = 0; c < f.cols; ++c) {
    double a = f.at(i, c), b = f.at(j, c);
    dot += a * b;
    na += a * a;
    nb += b * b;
  }
  if (na == 0.0 && nb == 0.0) return 0.0;  // both zero rows: similarity 1
  if (na == 0.0 || nb == 0.0) return 1.0;  // one zero row: similarity 0
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

QualityReport output_fidelity(const MoeModel& orig, const MoeModel& reduced,
                              const TokenBatch& batch) {
  int tokens = batch.tokens();
  if (tokens <= 0) fail(ErrorCode::Argument, "empty batch");
  Mat a = model_forward(orig, batch);
  Mat b = model_forward(reduced, batch);
  if (!a.same_shape(b)) fail(ErrorCode::Dimension, "model outputs differ in shape");

  QualityReport rep;
  double l2 = 0.0, cos_sum = 0.0;
  for (int t = 0; t < tokens; ++t) {
    const float* pa = a.row(t);
    const float* pb = b.row(t);
    double dist = 0.0, dot = 0.0, na = 0.0, nb = 0.0;
    for (int q = 0; q < a.cols; ++q) {
      double va = pa[q], vb = pb[q];
      double d = va - vb;
      dist += d * d;
      dot += va * vb;
      na += va * va;
      nb += vb * vb;
    }
    l2 += std::sqrt(dist);
    if (na == 0.0 && nb == 0.0)
      cos_sum += 1.0;
    else if (na == 0.0 || nb == 0.0)
      cos_sum += 0.0;
    else
      cos_sum += dot / (std::sqrt(na) * std::sqrt(nb));
  }
  rep.l2_error = l2;
  rep.l2_error_mean = l2 / tokens;
  rep.cosine_sim = cos_sum / tokens;
  return rep;
}

JensenCheck jensen_check(const MoeLayer& orig, const MoeLayer& merged, int d_h, int d_m,
                         const float* x) {
  if (orig.slots() != merged.slots())
    fail(ErrorCode::Argument, "merged layer does not share the original routing slots");

  Routing r = route(orig, x);
  std::vector<float> y_orig(d_h), y_merged(d_h);
  smoe_forward(orig, d_h, d_m, x, y_orig.data());
  smoe_forward(merged, d_h, d_m, x, y_merged.data());

  JensenCheck jc;
  double err = 0.0;
  for (int q = 0; q < d_h; ++q) {
    double d = static_cast<double>(y_orig[q]) - static_cast<double>(y_merged[q]);
    err += d * d;
  }
  jc.error = err;

  std::vector<float> ei(d_h), em(d_h);
  double bound = 0.0;
  for (size_t t = 0; t < r.slots.size(); ++t) {
    int slot = r.slots[t];
    expert_forward(orig.experts[orig.remap[slot]], x, d_h, d_m, ei.data());
    expert_forward(merged.experts[merged.remap[slot]], x, d_h, d_m, em.data());
    double s = 0.0;
    for (int q = 0; q < d_h; ++q) {
      double d = static_cast<double>(ei[q]) - static_cast<double>(em[q]);
      s += d * d;
    }
    bound += static_cast<double>(r.probs[t]) * s;
  }
  jc.bound = bound;
  return jc;
}

double silhouette(const Mat& features, const ClusterAssignment& assign, bool cosine) {
  int n = features.rows;
  if (n == 0 || static_cast<int>(assign.labels.size()) != n)
    fail(ErrorCode::Argument, "labels do not match features");
  int r = assign.r;
  std::vector<int> count(r, 0);
  for (int l : assign.labels) count[l] += 1;

  double total = 0.0;
#pragma omp parallel for num_threads(thread_cap()) schedule(static) reduction(+ : total)
  for (int i = 0; i < n; ++i) {
    int ci = assign.labels[i];
    if (count[ci] <= 1) continue;  // singleton contributes 0
    std::vector<double> sum_to(r, 0.0);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      sum_to[assign.labels[j]] += pair_distance(features, i, j, cosine);
    }
    double a = sum_to[ci] / (count[ci] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < r; ++c) {
      if (c == ci || count[c] == 0) continue;
      b = std::min(b, sum_to[c] / count[c]);
    }
    double m = std::max(a, b);
    total += m == 0.0 ? 0.0 : (b - a) / m;
  }
  return total / n;
}

double dunn_index(const Mat& features, const ClusterAssignment& assign, bool cosine) {
  int n = features.rows;
  if (n == 0 || static_cast<int>(assign.labels.size()) != n)
    fail(ErrorCode::Argument, "labels do not match features");
  if (assign.r < 2) fail(ErrorCode::Argument, "dunn index needs at least two clusters");
  double min_inter = std::numeric_limits<double>::infinity();
  double max_diam = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double d = pair_distance(features, i, j, cosine);
      if (assign.labels[i] == assign.labels[j])
        max_diam = std::max(max_diam, d);
      else
        min_inter = std::min(min_inter, d);
    }
  // Zero diameter (all clusters degenerate) maps to the capped sentinel.
  if (max_diam == 0.0) return min_inter > 0.0 ? 1e12 : 0.0;
  return std::min(min_inter / max_diam, 1e12);
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.empty()) fail(ErrorCode::Argument, "label vectors disagree");
  int n = static_cast<int>(a.size());
  int ra = 1 + *std::max_element(a.begin(), a.end());
  int rb = 1 + *std::max_element(b.begin(), b.end());
  std::vector<std::vector<std::uint64_t>> table(ra, std::vector<std::uint64_t>(rb, 0));
  for (int i = 0; i < n; ++i) table[a[i]][b[i]] += 1;

  auto choose2 = [](std::uint64_t x) { return static_cast<double>(x) * (x - 1) / 2.0; };
  double sum_cells = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (int i = 0; i < ra; ++i) {
    std::uint64_t row = 0;
    for (int j = 0; j < rb; ++j) {
      sum_cells += choose2(table[i][j]);
      row += table[i][j];
    }
    sum_a += choose2(row);
  }
  for (int j = 0; j < rb; ++j) {
    std::uint64_t col = 0;
    for (int i = 0; i < ra; ++i) col += table[i][j];
    sum_b += choose2(col);
  }
  double all = choose2(static_cast<std::uint64_t>(n));
  double expected = sum_a * sum_b / all;
  double maximum = 0.5 * (sum_a + sum_b);
  if (maximum == expected) return 1.0;  // both labelings trivial
  return (sum_cells - expected) / (maximum - expected);
}

double partition_cost(const Mat& features, const std::vector<int>& labels, int r) {
  int n = features.rows;
  int dim = features.cols;
  std::vector<std::vector<double>> mean(r, std::vector<double>(dim, 0.0));
  std::vector<int> count(r, 0);
  for (int i = 0; i < n; ++i) {
    count[labels[i]] += 1;
    const float* p = features.row(i);
    for (int j = 0; j < dim; ++j) mean[labels[i]][j] += p[j];
  }
  for (int c = 0; c < r; ++c)
    if (count[c] > 0)
      for (int j = 0; j < dim; ++j) mean[c][j] /= count[c];
  double cost = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* p = features.row(i);
    const std::vector<double>& mu = mean[labels[i]];
    for (int j = 0; j < dim; ++j) {
      double d = static_cast<double>(p[j]) - mu[j];
      cost += d * d;
    }
  }
  return cost;
}

std::uint64_t stirling2(int n, int r) {
  if (n < 0 || n > 20 || r < 0) fail(ErrorCode::Argument, "stirling2 supports 0 <= n <= 20");
  if (r > n) return 0;
  if (n == 0) return r == 0 ? 1 : 0;
  std::vector<std::vector<std::uint64_t>> s(n + 1, std::vector<std::uint64_t>(r + 1, 0));
  s[0][0] = 1;
  for (int i = 1; i <= n; ++i)
    for (int j = 1; j <= std::min(i, r); ++j)
      s[i][j] = s[i - 1][j - 1] + static_cast<std::uint64_t>(j) * s[i - 1][j];
  return s[n][r];
}

OptPartition opt_partition_oracle(const Mat& features, int r) {
  int n = features.rows;
  if (n < 1 || n > 12)
    fail(ErrorCode::Guard, "exact partition enumeration is guarded to n <= 12, got n=" +
                               std::to_string(n));
  if (r < 1 || r > n) fail(ErrorCode::Argument, "cluster count out of range");

  OptPartition best;
  best.cost = std::numeric_limits<double>::infinity();
  std::vector<int> labels(n, 0);

  // Restricted growth strings in lexicographic order; strict < keeps the
  // first (lexicographically smallest) optimum.
  std::uint64_t seen = 0;
  auto recurse = [&](auto&& self, int i, int used) -> void {
    if (i == n) {
      if (used != r) return;
      seen += 1;
      double cost = partition_cost(features, labels, r);
      if (cost < best.cost) {
        best.cost = cost;
        best.labels = labels;
      }
      return;
    }
    // Remaining slots must still be able to open blocks up to r.
    if (used + (n - i) < r) return;
    int limit = std::min(used, r - 1);
    for (int c = 0; c <= limit; ++c) {
      labels[i] = c;
      self(self, i + 1, std::max(used, c + 1));
    }
  };
  recurse(recurse, 0, 0);
  best.enumerated = seen;
  return best;
}

MoeModel build_soft_merged_model(const MoeModel& m, const std::vector<Membership>& per_layer) {
  if (per_layer.size() != m.layers.size())
    fail(ErrorCode::Argument, "one membership per layer required");
  MoeModel out;
  out.d_h = m.d_h;
  out.d_m = m.d_m;
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const MoeLayer& src = m.layers[l];
    const Mat& u = per_layer[l].u;
    int n = src.slots();
    int r = u.cols;
    if (u.rows != n) fail(ErrorCode::Argument, "membership rows do not match layer slots");
    if (r < 1 || r > n) fail(ErrorCode::Argument, "membership columns out of range");

    MoeLayer dst;
    dst.k = std::min(src.k, r);
    dst.remap.resize(r);
    for (int c = 0; c < r; ++c) dst.remap[c] = c;

    // Router: unnormalized membership-weighted sums of the original columns
    // (so crisp memberships sum each cluster's columns).
    dst.router = Mat(m.d_h, r);
    for (int j = 0; j < m.d_h; ++j)
      for (int c = 0; c < r; ++c) {
        double acc = 0.0;
        for (int i = 0; i < n; ++i)
          acc += static_cast<double>(u.at(i, c)) * static_cast<double>(src.router.at(j, i));
        dst.router.at(j, c) = static_cast<float>(acc);
      }

    // Experts: membership-weighted means, normalized by column mass (so
    // crisp memberships reproduce the hard average merge).
    for (int c = 0; c < r; ++c) {
      double mass = 0.0;
      for (int i = 0; i < n; ++i) mass += u.at(i, c);
      std::vector<const ExpertWeights*> members;
      std::vector<double> alphas;
      for (int i = 0; i < n; ++i) {
        members.push_back(&src.experts[src.remap[i]]);
        alphas.push_back(mass > 0.0 ? u.at(i, c) / mass : 1.0 / n);
      }
      ExpertWeights merged;
      merged.w_gate = Mat(m.d_h, m.d_m);
      merged.w_up = Mat(m.d_h, m.d_m);
      merged.w_down = Mat(m.d_m, m.d_h);
      for (size_t z = 0; z < merged.w_gate.size(); ++z) {
        double g = 0.0, up = 0.0;
        for (int i = 0; i < n; ++i) {
          g += alphas[i] * static_cast<double>(members[i]->w_gate.data[z]);
          up += alphas[i] * static_cast<double>(members[i]->w_up.data[z]);
        }
        merged.w_gate.data[z] = static_cast<float>(g);
        merged.w_up.data[z] = static_cast<float>(up);
      }
      for (size_t z = 0; z < merged.w_down.size(); ++z) {
        double d = 0.0;
        for (int i = 0; i < n; ++i) d += alphas[i] * static_cast<double>(members[i]->w_down.data[z]);
        merged.w_down.data[z] = static_cast<float>(d);
      }
      dst.experts.push_back(std::move(merged));
    }
    out.layers.push_back(std::move(dst));
  }
  return out;
}

QualityReport fcm_merge_eval(const MoeModel& m, const CalibrationStats& stats, int r,
                             const TokenBatch& batch) {
  if (stats.layers.size() != m.layers.size())
    fail(ErrorCode::Argument, "stats do not match model");
  std::vector<Membership> memberships;
  for (size_t l = 0; l < m.layers.size(); ++l) {
    FeatureMatrix f = expert_output_features(stats, static_cast<int>(l));
    FcmResult res = fcm_cluster(f.rows, r);
    memberships.push_back(std::move(res.membership));
  }
  MoeModel soft = build_soft_merged_model(m, memberships);
  return output_fidelity(m, soft, batch);
}

}  // namespace moekit
