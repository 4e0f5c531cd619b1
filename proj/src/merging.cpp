#include "moekit/merging.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace moekit {

const char* merge_strategy_name(MergeStrategy s) {
  switch (s) {
    case MergeStrategy::Average: return "average";
    case MergeStrategy::Frequency: return "frequency";
    case MergeStrategy::FixDom: return "fixdom";
  }
  return "?";
}

const char* fixdom_features_name(FixDomFeatures f) {
  switch (f) {
    case FixDomFeatures::Activation: return "act";
    case FixDomFeatures::Weight: return "weight";
    case FixDomFeatures::ActivationWeight: return "act+weight";
  }
  return "?";
}

std::vector<double> build_alphas(const std::vector<int>& members,
                                 const std::vector<std::uint64_t>& frequency,
                                 MergeStrategy strategy) {
  size_t c = members.size();
  if (c == 0) fail(ErrorCode::Argument, "empty cluster");
  std::vector<double> a(c, 1.0 / static_cast<double>(c));
  if (strategy != MergeStrategy::Frequency) return a;
  std::uint64_t total = 0;
  for (int i : members) {
    if (i < 0 || i >= static_cast<int>(frequency.size()))
      fail(ErrorCode::Argument, "cluster member out of range");
    total += frequency[i];
  }
  if (total == 0) return a;  // all-zero frequencies fall back to average
  for (size_t s = 0; s < c; ++s)
    a[s] = static_cast<double>(frequency[members[s]]) / static_cast<double>(total);
  return a;
}

ExpertWeights merge_linear(const std::vector<const ExpertWeights*>& members,
                           const std::vector<double>& alphas, int d_h, int d_m) {
  if (members.empty() || members.size() != alphas.size())
    fail(ErrorCode::Argument, "members and alphas disagree");
  ExpertWeights out;
  out.w_gate = Mat(d_h, d_m);
  out.w_up = Mat(d_h, d_m);
  out.w_down = Mat(d_m, d_h);
  auto combine = [&](Mat ExpertWeights::*field, Mat& dst) {
    size_t len = dst.size();
    for (size_t z = 0; z < len; ++z) {
      double acc = 0.0;
      for (size_t s = 0; s < members.size(); ++s)
        acc += alphas[s] * static_cast<double>((members[s]->*field).data[z]);
      dst.data[z] = static_cast<float>(acc);
    }
  };
  combine(&ExpertWeights::w_gate, out.w_gate);
  combine(&ExpertWeights::w_up, out.w_up);
  combine(&ExpertWeights::w_down, out.w_down);
  return out;
}

namespace {

// Pearson correlation between two feature columns; zero variance on either
// side yields 0.
double column_correlation(const Mat& a, int ca, const Mat& b, int cb) {
  int rows = a.rows;
  double ma = 0.0, mb = 0.0;
  for (int t = 0; t < rows; ++t) {
    ma += a.at(t, ca);
    mb += b.at(t, cb);
  }
  ma /= rows;
  mb /= rows;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (int t = 0; t < rows; ++t) {
    double da = a.at(t, ca) - ma;
    double db = b.at(t, cb) - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / std::sqrt(va * vb);
}

// One column per intermediate dim p: W_gate[:, p] | W_up[:, p] | W_down[p, :].
Mat fixdom_weight_columns(const ExpertWeights& e) {
  int d_h = e.w_gate.rows;
  int d_m = e.w_gate.cols;
  Mat f(3 * d_h, d_m);
  for (int p = 0; p < d_m; ++p) {
    for (int j = 0; j < d_h; ++j) {
      f.at(j, p) = e.w_gate.at(j, p);
      f.at(d_h + j, p) = e.w_up.at(j, p);
      f.at(2 * d_h + j, p) = e.w_down.at(p, j);
    }
  }
  return f;
}

// Writes (v - mean) / std column by column; zero-variance columns go to 0.
void zscore_columns(Mat& f) {
  for (int c = 0; c < f.cols; ++c) {
    double mean = 0.0;
    for (int t = 0; t < f.rows; ++t) mean += f.at(t, c);
    mean /= f.rows;
    double var = 0.0;
    for (int t = 0; t < f.rows; ++t) {
      double d = f.at(t, c) - mean;
      var += d * d;
    }
    var /= f.rows;
    if (var == 0.0) {
      for (int t = 0; t < f.rows; ++t) f.at(t, c) = 0.0f;
      continue;
    }
    double inv = 1.0 / std::sqrt(var);
    for (int t = 0; t < f.rows; ++t)
      f.at(t, c) = static_cast<float>((f.at(t, c) - mean) * inv);
  }
}

// Activation block and weight block z-scored independently, stacked.
Mat fixdom_act_weight_columns(const Mat& act, const ExpertWeights& e) {
  Mat a = act;
  Mat w = fixdom_weight_columns(e);
  zscore_columns(a);
  zscore_columns(w);
  Mat f(a.rows + w.rows, a.cols);
  for (int t = 0; t < a.rows; ++t)
    std::copy(a.row(t), a.row(t) + a.cols, f.row(t));
  for (int t = 0; t < w.rows; ++t)
    std::copy(w.row(t), w.row(t) + w.cols, f.row(a.rows + t));
  return f;
}

}  // namespace

ExpertWeights fixdom_merge(const std::vector<const ExpertWeights*>& members,
                           const std::vector<Mat>& features, int dominant_idx,
                           const std::vector<double>& alphas, int d_h, int d_m) {
  size_t c = members.size();
  if (c == 0 || features.size() != c || alphas.size() != c)
    fail(ErrorCode::Argument, "members, features and alphas disagree");
  if (dominant_idx < 0 || dominant_idx >= static_cast<int>(c))
    fail(ErrorCode::Argument, "dominant index out of range");
  for (const Mat& f : features)
    if (f.cols != d_m || f.rows != features[0].rows)
      fail(ErrorCode::Dimension, "fixdom feature matrices must share shape tokens x d_m");

  const Mat& dom_f = features[dominant_idx];

  // assignment[s][p]: dominant column receiving member s's column p.
  std::vector<std::vector<int>> assignment(c);
  for (size_t s = 0; s < c; ++s) {
    assignment[s].resize(d_m);
    if (static_cast<int>(s) == dominant_idx) {
      for (int p = 0; p < d_m; ++p) assignment[s][p] = p;
      continue;
    }
    for (int p = 0; p < d_m; ++p) {
      int best = 0;
      double best_corr = column_correlation(features[s], p, dom_f, 0);
      for (int q = 1; q < d_m; ++q) {
        double corr = column_correlation(features[s], p, dom_f, q);
        if (corr > best_corr) {
          best_corr = corr;
          best = q;
        }
      }
      assignment[s][p] = best;
    }
  }

  // Dominant column q collects every assigned member column; the merged
  // column is their alpha-weighted mean (weights renormalized per column).
  ExpertWeights out;
  out.w_gate = Mat(d_h, d_m);
  out.w_up = Mat(d_h, d_m);
  out.w_down = Mat(d_m, d_h);
  std::vector<std::vector<std::pair<int, int>>> groups(d_m);  // (member, col)
  for (size_t s = 0; s < c; ++s)
    for (int p = 0; p < d_m; ++p) groups[assignment[s][p]].push_back({static_cast<int>(s), p});

  for (int q = 0; q < d_m; ++q) {
    double wsum = 0.0;
    for (auto [s, p] : groups[q]) wsum += alphas[s];
    if (groups[q].empty() || wsum <= 0.0) {
      // Nothing mapped here (or zero weight): keep the dominant's column.
      const ExpertWeights* dom = members[dominant_idx];
      for (int j = 0; j < d_h; ++j) {
        out.w_gate.at(j, q) = dom->w_gate.at(j, q);
        out.w_up.at(j, q) = dom->w_up.at(j, q);
      }
      for (int j = 0; j < d_h; ++j) out.w_down.at(q, j) = dom->w_down.at(q, j);
      continue;
    }
    for (int j = 0; j < d_h; ++j) {
      double g = 0.0, u = 0.0, d = 0.0;
      for (auto [s, p] : groups[q]) {
        g += alphas[s] * static_cast<double>(members[s]->w_gate.at(j, p));
        u += alphas[s] * static_cast<double>(members[s]->w_up.at(j, p));
        d += alphas[s] * static_cast<double>(members[s]->w_down.at(p, j));
      }
      out.w_gate.at(j, q) = static_cast<float>(g / wsum);
      out.w_up.at(j, q) = static_cast<float>(u / wsum);
      out.w_down.at(q, j) = static_cast<float>(d / wsum);
    }
  }
  return out;
}

MergePlan build_merge_plan(const MoeModel& m,
                           const std::vector<ClusterAssignment>& assignments,
                           const CalibrationStats* stats, MergeStrategy strategy,
                           FixDomFeatures fixdom_features) {
  if (assignments.size() != m.layers.size())
    fail(ErrorCode::Argument, "one assignment per layer required");
  if (strategy == MergeStrategy::Frequency && !stats)
    fail(ErrorCode::Argument, "frequency merging needs calibration stats");
  MergePlan plan;
  plan.strategy = strategy;
  plan.fixdom_features = fixdom_features;
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const ClusterAssignment& a = assignments[l];
    int n = m.layers[l].slots();
    if (static_cast<int>(a.labels.size()) != n)
      fail(ErrorCode::Argument, "assignment size does not match layer " + std::to_string(l));
    LayerPlan lp;
    lp.labels = a.labels;
    std::vector<std::vector<int>> members = cluster_members(a);
    const std::vector<std::uint64_t>* freq =
        stats ? &stats->layers[l].frequency : nullptr;
    for (const std::vector<int>& mem : members) {
      if (mem.empty()) fail(ErrorCode::Argument, "empty cluster in assignment");
      ClusterPlan cp;
      cp.members = mem;
      std::vector<std::uint64_t> none;
      cp.alphas = build_alphas(mem, freq ? *freq : none,
                               strategy == MergeStrategy::Frequency ? MergeStrategy::Frequency
                                                                    : MergeStrategy::Average);
      if (strategy == MergeStrategy::FixDom) {
        // Dominant expert: highest calibration frequency when stats are
        // present (lowest slot on ties), else the lowest slot.
        int dom = mem[0];
        if (freq)
          for (int i : mem)
            if ((*freq)[i] > (*freq)[dom]) dom = i;
        cp.dominant = dom;
      }
      lp.clusters.push_back(std::move(cp));
    }
    plan.layers.push_back(std::move(lp));
  }
  return plan;
}

MoeModel apply_merge_plan(const MoeModel& m, const MergePlan& plan,
                          const CalibrationStats* stats) {
  if (plan.layers.size() != m.layers.size())
    fail(ErrorCode::Argument, "plan layer count does not match model");
  bool need_act = plan.strategy == MergeStrategy::FixDom &&
                  plan.fixdom_features != FixDomFeatures::Weight;
  if (need_act && (!stats || !stats->has_activations))
    fail(ErrorCode::Argument,
         "fixdom with activation features needs stats collected with activation caching; "
         "re-run calibration with caching enabled");

  MoeModel out;
  out.d_h = m.d_h;
  out.d_m = m.d_m;
  for (size_t l = 0; l < m.layers.size(); ++l) {
    const MoeLayer& src = m.layers[l];
    const LayerPlan& lp = plan.layers[l];
    int n = src.slots();
    if (static_cast<int>(lp.labels.size()) != n)
      fail(ErrorCode::Argument, "plan labels do not match layer " + std::to_string(l));

    MoeLayer dst;
    dst.router = src.router;  // routing slots untouched
    dst.k = src.k;
    dst.remap.resize(n);
    for (int i = 0; i < n; ++i) {
      int c = lp.labels[i];
      if (c < 0 || c >= static_cast<int>(lp.clusters.size()))
        fail(ErrorCode::Argument, "label out of range in plan");
      dst.remap[i] = c;
    }

    for (const ClusterPlan& cp : lp.clusters) {
      std::vector<const ExpertWeights*> mem;
      for (int i : cp.members) {
        if (i < 0 || i >= n) fail(ErrorCode::Argument, "plan member out of range");
        mem.push_back(&src.experts[src.remap[i]]);
      }
      if (plan.strategy != MergeStrategy::FixDom) {
        dst.experts.push_back(merge_linear(mem, cp.alphas, m.d_h, m.d_m));
        continue;
      }
      int dom_pos = -1;
      for (size_t s = 0; s < cp.members.size(); ++s)
        if (cp.members[s] == cp.dominant) dom_pos = static_cast<int>(s);
      if (dom_pos < 0) fail(ErrorCode::Argument, "dominant is not a cluster member");

      std::vector<Mat> feats;
      for (size_t s = 0; s < cp.members.size(); ++s) {
        int slot = cp.members[s];
        Mat f;
        switch (plan.fixdom_features) {
          case FixDomFeatures::Activation:
            f = stats->layers[l].activations[slot];
            break;
          case FixDomFeatures::Weight:
            f = fixdom_weight_columns(*mem[s]);
            break;
          case FixDomFeatures::ActivationWeight:
            f = fixdom_act_weight_columns(stats->layers[l].activations[slot], *mem[s]);
            break;
        }
        feats.push_back(std::move(f));
      }
      dst.experts.push_back(
          fixdom_merge(mem, feats, dom_pos, cp.alphas, m.d_h, m.d_m));
    }
    out.layers.push_back(std::move(dst));
  }
  return out;
}

}  // namespace moekit
