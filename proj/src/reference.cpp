#include "moekit/reference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace moekit::ref {

namespace {

double dot_f64(const float* a, const float* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

double row_distance(const Mat& f, int i, int j) {
  double s = 0.0;
  for (int c = 0; c < f.cols; ++c) {
    double d = static_cast<double>(f.at(i, c)) - static_cast<double>(f.at(j, c));
    s += d * d;
  }
  return std::sqrt(s);
}

double cosine_distance(const Mat& f, int i, int j) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int c = 0; c < f.cols; ++c) {
    double a = f.at(i, c), b = f.at(j, c);
    dot += a * b;
    na += a * a;
    nb += b * b;
  }
  if (na == 0.0 && nb == 0.0) return 0.0;
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

double pair_distance(const Mat& f, int i, int j, bool cosine) {
  return cosine ? cosine_distance(f, i, j) : row_distance(f, i, j);
}

}  // namespace

std::vector<float> expert_forward(const ExpertWeights& e, const float* x, int d_h, int d_m) {
  std::vector<float> y(d_h, 0.0f);
  std::vector<double> acc(d_h, 0.0);
  for (int p = 0; p < d_m; ++p) {
    double zg = 0.0, zu = 0.0;
    for (int j = 0; j < d_h; ++j) {
      zg += static_cast<double>(x[j]) * static_cast<double>(e.w_gate.at(j, p));
      zu += static_cast<double>(x[j]) * static_cast<double>(e.w_up.at(j, p));
    }
    float z = static_cast<float>(zg);
    float act = z / (1.0f + std::exp(-z)) * static_cast<float>(zu);
    for (int q = 0; q < d_h; ++q)
      acc[q] += static_cast<double>(act) * static_cast<double>(e.w_down.at(p, q));
  }
  for (int q = 0; q < d_h; ++q) y[q] = static_cast<float>(acc[q]);
  return y;
}

std::vector<float> smoe_forward_dense(const MoeLayer& layer, int d_h, int d_m, const float* x) {
  int n = layer.slots();
  std::vector<double> logits(n, 0.0);
  for (int i = 0; i < n; ++i) {
    std::vector<float> col(d_h);
    for (int j = 0; j < d_h; ++j) col[j] = layer.router.at(j, i);
    logits[i] = dot_f64(x, col.data(), d_h);
  }
  std::vector<float> logits_f(n);
  for (int i = 0; i < n; ++i) logits_f[i] = static_cast<float>(logits[i]);

  // Top-k selection by sorting (logit desc, index asc).
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return logits_f[a] > logits_f[b]; });
  std::vector<double> weight(n, 0.0);
  double max_logit = -std::numeric_limits<double>::infinity();
  for (int t = 0; t < layer.k; ++t)
    max_logit = std::max(max_logit, static_cast<double>(logits_f[order[t]]));
  double denom = 0.0;
  for (int t = 0; t < layer.k; ++t)
    denom += std::exp(static_cast<double>(logits_f[order[t]]) - max_logit);
  for (int t = 0; t < layer.k; ++t) {
    int i = order[t];
    weight[i] = std::exp(static_cast<double>(logits_f[i]) - max_logit) / denom;
  }

  std::vector<double> acc(d_h, 0.0);
  for (int i = 0; i < n; ++i) {
    if (weight[i] == 0.0) continue;
    float w = static_cast<float>(weight[i]);
    std::vector<float> out = expert_forward(layer.experts[layer.remap[i]], x, d_h, d_m);
    for (int q = 0; q < d_h; ++q) acc[q] += static_cast<double>(w) * static_cast<double>(out[q]);
  }
  std::vector<float> y(d_h);
  for (int q = 0; q < d_h; ++q) y[q] = static_cast<float>(acc[q]);
  return y;
}

Mat model_forward(const MoeModel& m, const TokenBatch& batch) {
  Mat cur = batch.x;
  for (const MoeLayer& layer : m.layers) {
    Mat next(cur.rows, m.d_h);
    for (int t = 0; t < cur.rows; ++t) {
      std::vector<float> y = smoe_forward_dense(layer, m.d_h, m.d_m, cur.row(t));
      std::copy(y.begin(), y.end(), next.row(t));
    }
    cur = std::move(next);
  }
  return cur;
}

void recount_routing(const MoeModel& m, const TokenBatch& batch,
                     std::vector<std::vector<std::uint64_t>>& freq_out,
                     std::vector<std::vector<double>>& score_out) {
  freq_out.clear();
  score_out.clear();
  Mat cur = batch.x;
  for (const MoeLayer& layer : m.layers) {
    int n = layer.slots();
    std::vector<std::uint64_t> f(n, 0);
    std::vector<double> s(n, 0.0);
    Mat next(cur.rows, m.d_h);
    for (int t = 0; t < cur.rows; ++t) {
      const float* x = cur.row(t);
      std::vector<float> logits_f(n);
      for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < m.d_h; ++j)
          acc += static_cast<double>(x[j]) * static_cast<double>(layer.router.at(j, i));
        logits_f[i] = static_cast<float>(acc);
      }
      std::vector<int> order(n);
      for (int i = 0; i < n; ++i) order[i] = i;
      std::stable_sort(order.begin(), order.end(),
                       [&](int a, int b) { return logits_f[a] > logits_f[b]; });
      double max_logit = logits_f[order[0]];
      for (int t2 = 1; t2 < layer.k; ++t2)
        max_logit = std::max(max_logit, static_cast<double>(logits_f[order[t2]]));
      double denom = 0.0;
      for (int t2 = 0; t2 < layer.k; ++t2)
        denom += std::exp(static_cast<double>(logits_f[order[t2]]) - max_logit);
      for (int t2 = 0; t2 < layer.k; ++t2) {
        int i = order[t2];
        f[i] += 1;
        s[i] += std::exp(static_cast<double>(logits_f[i]) - max_logit) / denom;
      }
      std::vector<float> y = smoe_forward_dense(layer, m.d_h, m.d_m, x);
      std::copy(y.begin(), y.end(), next.row(t));
    }
    freq_out.push_back(std::move(f));
    score_out.push_back(std::move(s));
    cur = std::move(next);
  }
}

DistMatrix distance_matrix(const Mat& features) {
  DistMatrix d(features.rows);
  for (int i = 0; i < features.rows; ++i)
    for (int j = 0; j < features.rows; ++j) d.at(i, j) = i == j ? 0.0 : row_distance(features, i, j);
  return d;
}

double silhouette(const Mat& features, const std::vector<int>& labels, int r, bool cosine) {
  int n = features.rows;
  std::vector<int> count(r, 0);
  for (int l : labels) count[l] += 1;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    int ci = labels[i];
    if (count[ci] <= 1) continue;  // singleton scores 0
    double a = 0.0;
    std::vector<double> mean_to(r, 0.0);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      mean_to[labels[j]] += pair_distance(features, i, j, cosine);
    }
    a = mean_to[ci] / (count[ci] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < r; ++c) {
      if (c == ci || count[c] == 0) continue;
      b = std::min(b, mean_to[c] / count[c]);
    }
    double m = std::max(a, b);
    total += m == 0.0 ? 0.0 : (b - a) / m;
  }
  return total / n;
}

double dunn_index(const Mat& features, const std::vector<int>& labels, int r, bool cosine) {
  int n = features.rows;
  double min_inter = std::numeric_limits<double>::infinity();
  double max_diam = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double d = pair_distance(features, i, j, cosine);
      if (labels[i] == labels[j])
        max_diam = std::max(max_diam, d);
      else
        min_inter = std::min(min_inter, d);
    }
  (void)r;
  if (max_diam == 0.0) return min_inter > 0.0 ? 1e12 : 0.0;
  return std::min(min_inter / max_diam, 1e12);
}

ExpertWeights merge_linear(const std::vector<const ExpertWeights*>& members,
                           const std::vector<double>& alphas, int d_h, int d_m) {
  ExpertWeights out;
  out.w_gate = Mat(d_h, d_m);
  out.w_up = Mat(d_h, d_m);
  out.w_down = Mat(d_m, d_h);
  for (int j = 0; j < d_h; ++j)
    for (int p = 0; p < d_m; ++p) {
      double g = 0.0, u = 0.0;
      for (size_t s = 0; s < members.size(); ++s) {
        g += alphas[s] * static_cast<double>(members[s]->w_gate.at(j, p));
        u += alphas[s] * static_cast<double>(members[s]->w_up.at(j, p));
      }
      out.w_gate.at(j, p) = static_cast<float>(g);
      out.w_up.at(j, p) = static_cast<float>(u);
    }
  for (int p = 0; p < d_m; ++p)
    for (int q = 0; q < d_h; ++q) {
      double d = 0.0;
      for (size_t s = 0; s < members.size(); ++s)
        d += alphas[s] * static_cast<double>(members[s]->w_down.at(p, q));
      out.w_down.at(p, q) = static_cast<float>(d);
    }
  return out;
}

}  // namespace moekit::ref
