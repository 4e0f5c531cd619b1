#include "moekit/cli.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moekit/baselines.hpp"
#include "moekit/calibration.hpp"
#include "moekit/clustering.hpp"
#include "moekit/error.hpp"
#include "moekit/evaluation.hpp"
#include "moekit/forward.hpp"
#include "moekit/io.hpp"
#include "moekit/merging.hpp"
#include "moekit/synth.hpp"
#include "moekit/threading.hpp"

namespace moekit::cli {

namespace {

using nlohmann::json;

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

void emit_report(json& doc, const Timer& timer, const std::string& out_path) {
  doc["timing_ms"] = timer.ms();
  if (out_path.empty()) {
    std::cout << doc.dump(2) << "\n";
    return;
  }
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open " + out_path + " for writing");
  out << doc.dump(2) << "\n";
  if (!out) fail(ErrorCode::Io, "write failed for " + out_path);
}

json report_head(const std::string& command) {
  json doc;
  doc["schema_version"] = 1;
  doc["kind"] = command + "_report";
  doc["meta"] = json::object();
  doc["meta"]["tool"] = "moekit";
  doc["meta"]["command"] = command;
  return doc;
}

FeatureKind parse_metric(const std::string& metric) {
  if (metric == "eo") return FeatureKind::ExpertOutput;
  if (metric == "rl") return FeatureKind::RouterWeightColumn;
  if (metric == "rl-profile") return FeatureKind::RouterLogitProfile;
  if (metric == "weight") return FeatureKind::Weight;
  fail(ErrorCode::Argument, "unknown metric " + metric);
}

Linkage parse_linkage(const std::string& name) {
  if (name == "single") return Linkage::Single;
  if (name == "complete") return Linkage::Complete;
  if (name == "average") return Linkage::Average;
  fail(ErrorCode::Argument, "unknown linkage " + name);
}

FeatureMatrix build_features(FeatureKind kind, const MoeModel* model,
                             const CalibrationStats* stats, int layer) {
  switch (kind) {
    case FeatureKind::ExpertOutput:
      if (!stats) fail(ErrorCode::Argument, "metric eo needs --stats");
      return expert_output_features(*stats, layer);
    case FeatureKind::RouterWeightColumn:
      if (!model) fail(ErrorCode::Argument, "metric rl needs --model");
      return router_weight_column_features(*model, layer);
    case FeatureKind::RouterLogitProfile:
      if (!stats) fail(ErrorCode::Argument, "metric rl-profile needs --stats");
      return router_logit_profile_features(*stats, layer);
    case FeatureKind::Weight:
      if (!model) fail(ErrorCode::Argument, "metric weight needs --model");
      return weight_features(*model, layer);
  }
  fail(ErrorCode::Argument, "unknown feature kind");
}

json assignment_to_json(const ClusterAssignment& a) {
  json j;
  j["labels"] = a.labels;
  j["r"] = a.r;
  json trace = json::array();
  for (const MergeStep& s : a.merge_trace) trace.push_back({s.a, s.b, s.dist});
  j["merge_trace"] = std::move(trace);
  return j;
}

std::vector<ClusterAssignment> assignments_from_json(const json& doc) {
  std::vector<ClusterAssignment> out;
  for (const json& jl : doc.at("layers")) {
    ClusterAssignment a;
    a.labels = jl.at("labels").get<std::vector<int>>();
    a.r = jl.at("r");
    out.push_back(std::move(a));
  }
  return out;
}

json quality_to_json(const QualityReport& q) {
  json j;
  j["l2_error"] = q.l2_error;
  j["l2_error_mean"] = q.l2_error_mean;
  j["cosine_sim"] = q.cosine_sim;
  auto put_opt = [&](const char* key, double v) {
    if (std::isnan(v))
      j[key] = nullptr;
    else
      j[key] = v;
  };
  put_opt("silhouette_euclidean", q.silhouette_euclidean);
  put_opt("silhouette_cosine", q.silhouette_cosine);
  put_opt("dunn_euclidean", q.dunn_euclidean);
  put_opt("dunn_cosine", q.dunn_cosine);
  put_opt("jensen_slack_min", q.jensen_slack_min);
  return j;
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    fail(ErrorCode::Io, path + ": invalid JSON: " + e.what());
  }
  return doc;
}

// ---- gen ----------------------------------------------------------------

struct GenArgs {
  std::string spec_path, out_model, out_batch, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> tokens;
};

void run_gen(const GenArgs& a) {
  Timer timer;
  PlantedSpec spec = a.spec_path.empty() ? PlantedSpec{} : load_planted_spec(a.spec_path);
  if (a.seed) spec.seed = *a.seed;
  if (a.tokens) spec.tokens = *a.tokens;

  MoeModel model = gen_planted_model(spec);
  save_checkpoint(model, a.out_model);
  if (!a.out_batch.empty()) {
    TokenBatch batch = gen_batch(spec, spec.tokens);
    save_batch(batch, a.out_batch);
  }

  json doc = report_head("gen");
  doc["meta"]["seed"] = spec.seed;
  doc["spec"] = {{"layers", spec.layers}, {"experts", spec.experts}, {"groups", spec.groups},
                 {"d_h", spec.d_h},       {"d_m", spec.d_m},         {"top_k", spec.top_k},
                 {"sigma", spec.sigma},   {"tokens", spec.tokens}};
  doc["planted_labels"] = planted_labels(spec);
  doc["model_path"] = a.out_model;
  if (!a.out_batch.empty()) doc["batch_path"] = a.out_batch;
  emit_report(doc, timer, a.out);
}

// ---- calibrate ------------------------------------------------------------

struct CalibrateArgs {
  std::string model, batch, out_stats, out;
  bool cache_activations = false;
  std::uint64_t act_limit = 2ULL << 30;
};

void run_calibrate(const CalibrateArgs& a) {
  Timer timer;
  MoeModel model = load_checkpoint(a.model);
  TokenBatch batch = load_batch(a.batch);
  CollectOptions opts;
  opts.cache_activations = a.cache_activations;
  opts.activation_cache_limit_bytes = a.act_limit;
  CalibrationStats stats = collect_stats(model, batch, opts);
  save_stats(stats, a.out_stats);

  json doc = report_head("calibrate");
  doc["meta"]["cache_activations"] = a.cache_activations;
  doc["tokens"] = stats.tokens;
  json layers = json::array();
  for (const LayerStats& ls : stats.layers) {
    json jl;
    jl["n"] = ls.n;
    jl["frequency"] = ls.frequency;
    jl["router_score"] = ls.router_score;
    layers.push_back(std::move(jl));
  }
  doc["layers"] = std::move(layers);
  doc["stats_path"] = a.out_stats;
  emit_report(doc, timer, a.out);
}

// ---- cluster ----------------------------------------------------------------

struct ClusterArgs {
  std::string model, stats, out;
  std::string metric = "eo";
  std::string method = "hc";
  std::string linkage = "average";
  int budget = 0;
  double non_uniform = 0.0;
  std::uint64_t seed = 0;
  double fcm_m = 2.0;
  double fcm_tol = 1e-6;
  int max_iter = 200;
};

void run_cluster(const ClusterArgs& a) {
  Timer timer;
  if ((a.budget > 0) == (a.non_uniform > 0.0))
    fail(ErrorCode::Argument, "exactly one of --budget and --non-uniform is required");

  std::optional<MoeModel> model;
  if (!a.model.empty()) model = load_checkpoint(a.model);
  std::optional<CalibrationStats> stats;
  if (!a.stats.empty()) stats = load_stats(a.stats);

  FeatureKind kind = parse_metric(a.metric);
  int layer_count = 0;
  if (model)
    layer_count = static_cast<int>(model->layers.size());
  else if (stats)
    layer_count = static_cast<int>(stats->layers.size());
  else
    fail(ErrorCode::Argument, "cluster needs --model or --stats");

  std::vector<int> budgets(layer_count, a.budget);
  if (a.non_uniform > 0.0) {
    if (!stats) fail(ErrorCode::Argument, "--non-uniform needs --stats");
    budgets = non_uniform_budgets(*stats, a.non_uniform);
  }

  json doc = report_head("cluster");
  doc["meta"]["metric"] = a.metric;
  doc["meta"]["method"] = a.method;
  if (a.method == "hc") doc["meta"]["linkage"] = a.linkage;
  if (a.method == "kmeans-random") doc["meta"]["seed"] = a.seed;
  if (a.budget > 0)
    doc["meta"]["budget"] = a.budget;
  else
    doc["meta"]["keep_ratio"] = a.non_uniform;

  json layers = json::array();
  for (int l = 0; l < layer_count; ++l) {
    FeatureMatrix f = build_features(kind, model ? &*model : nullptr,
                                     stats ? &*stats : nullptr, l);
    int r = budgets[l];
    ClusterAssignment assign;
    json jl;
    if (a.method == "hc") {
      DistMatrix d = distance_matrix(f.rows);
      assign = hierarchical_cluster(d, r, parse_linkage(a.linkage));
    } else if (a.method == "kmeans") {
      assign = kmeans_cluster(f.rows, r, KmeansInit::FixedFirstR, 0, a.max_iter);
    } else if (a.method == "kmeans-random") {
      assign = kmeans_cluster(f.rows, r, KmeansInit::Random, a.seed, a.max_iter);
    } else if (a.method == "fcm") {
      FcmResult res = fcm_cluster(f.rows, r, a.fcm_m, a.fcm_tol, a.max_iter);
      assign = harden_membership(res.membership);
      json u = json::array();
      for (int i = 0; i < res.membership.u.rows; ++i)
        u.push_back(std::vector<float>(res.membership.u.row(i),
                                       res.membership.u.row(i) + res.membership.u.cols));
      jl["membership"] = std::move(u);
    } else {
      fail(ErrorCode::Argument, "unknown method " + a.method);
    }
    json base = assignment_to_json(assign);
    for (auto& [key, value] : base.items()) jl[key] = value;
    layers.push_back(std::move(jl));
  }
  doc["layers"] = std::move(layers);
  emit_report(doc, timer, a.out);
}

// ---- merge ----------------------------------------------------------------

struct MergeArgs {
  std::string model, clusters, stats, batch, out_model, out;
  std::string strategy = "frequency";
  std::string fixdom_features = "act";
};

void run_merge(const MergeArgs& a) {
  Timer timer;
  MoeModel model = load_checkpoint(a.model);
  json cdoc = load_json_file(a.clusters);

  json doc = report_head("merge");
  doc["meta"]["strategy"] = a.strategy;

  MoeModel merged;
  if (a.strategy == "soft") {
    std::vector<Membership> memberships;
    const json& layers = cdoc.at("layers");
    for (const json& jl : layers) {
      if (!jl.contains("membership"))
        fail(ErrorCode::Argument, "--strategy soft needs a cluster report with memberships (fcm)");
      Membership ms;
      const json& u = jl.at("membership");
      int rows = static_cast<int>(u.size());
      int cols = rows > 0 ? static_cast<int>(u.at(0).size()) : 0;
      ms.u = Mat(rows, cols);
      for (int i = 0; i < rows; ++i) {
        std::vector<float> row = u.at(i).get<std::vector<float>>();
        if (static_cast<int>(row.size()) != cols)
          fail(ErrorCode::Argument, "ragged membership matrix");
        std::copy(row.begin(), row.end(), ms.u.row(i));
      }
      memberships.push_back(std::move(ms));
    }
    merged = build_soft_merged_model(model, memberships);
  } else {
    MergeStrategy strategy;
    if (a.strategy == "average")
      strategy = MergeStrategy::Average;
    else if (a.strategy == "frequency")
      strategy = MergeStrategy::Frequency;
    else if (a.strategy == "fixdom")
      strategy = MergeStrategy::FixDom;
    else
      fail(ErrorCode::Argument, "unknown strategy " + a.strategy);

    FixDomFeatures ff;
    if (a.fixdom_features == "act")
      ff = FixDomFeatures::Activation;
    else if (a.fixdom_features == "weight")
      ff = FixDomFeatures::Weight;
    else if (a.fixdom_features == "act+weight")
      ff = FixDomFeatures::ActivationWeight;
    else
      fail(ErrorCode::Argument, "unknown fixdom features " + a.fixdom_features);

    std::vector<ClusterAssignment> assignments = assignments_from_json(cdoc);

    std::optional<CalibrationStats> stats;
    bool need_act = strategy == MergeStrategy::FixDom && ff != FixDomFeatures::Weight;
    if (need_act) {
      if (a.batch.empty())
        fail(ErrorCode::Argument,
             "fixdom with activation features needs --batch to recompute activation caches");
      TokenBatch batch = load_batch(a.batch);
      CollectOptions opts;
      opts.cache_activations = true;
      stats = collect_stats(model, batch, opts);
    } else if (!a.stats.empty()) {
      stats = load_stats(a.stats);
    }
    if (strategy == MergeStrategy::Frequency && !stats)
      fail(ErrorCode::Argument, "frequency merging needs --stats");

    MergePlan plan =
        build_merge_plan(model, assignments, stats ? &*stats : nullptr, strategy, ff);
    merged = apply_merge_plan(model, plan, stats ? &*stats : nullptr);

    if (strategy == MergeStrategy::FixDom) doc["meta"]["fixdom_features"] = a.fixdom_features;
    json jplan;
    jplan["strategy"] = merge_strategy_name(plan.strategy);
    json jlayers = json::array();
    for (const LayerPlan& lp : plan.layers) {
      json jl;
      jl["labels"] = lp.labels;
      json jclusters = json::array();
      for (const ClusterPlan& cp : lp.clusters) {
        json jc;
        jc["members"] = cp.members;
        jc["alphas"] = cp.alphas;
        if (cp.dominant >= 0) jc["dominant"] = cp.dominant;
        jclusters.push_back(std::move(jc));
      }
      jl["clusters"] = std::move(jclusters);
      jlayers.push_back(std::move(jl));
    }
    jplan["layers"] = std::move(jlayers);
    doc["plan"] = std::move(jplan);
  }

  save_checkpoint(merged, a.out_model);
  doc["model_path"] = a.out_model;
  json stored = json::array();
  for (const MoeLayer& layer : merged.layers) stored.push_back(layer.stored());
  doc["stored_experts"] = std::move(stored);
  emit_report(doc, timer, a.out);
}

// ---- prune ----------------------------------------------------------------

struct PruneArgs {
  std::string model, batch, stats, out_model, out;
  std::string method;
  double keep_ratio = 0.0;
  int budget = 0;
  std::uint64_t samples = 0;
  std::uint64_t seed = 0;
  std::string objective = "layer";
};

void run_prune(const PruneArgs& a) {
  Timer timer;
  MoeModel model = load_checkpoint(a.model);

  json doc = report_head("prune");
  doc["meta"]["method"] = a.method;

  if (a.method == "msmoe") {
    if (a.stats.empty()) fail(ErrorCode::Argument, "msmoe needs --stats");
    if (a.budget < 1) fail(ErrorCode::Argument, "msmoe needs --budget");
    CalibrationStats stats = load_stats(a.stats);
    std::vector<ClusterAssignment> groups = msmoe_group(model, stats, a.budget);
    MergePlan plan = build_merge_plan(model, groups, &stats, MergeStrategy::Frequency);
    MoeModel merged = apply_merge_plan(model, plan, &stats);
    save_checkpoint(merged, a.out_model);
    doc["meta"]["budget"] = a.budget;
    json layers = json::array();
    for (const ClusterAssignment& g : groups) layers.push_back(assignment_to_json(g));
    doc["layers"] = std::move(layers);
    doc["model_path"] = a.out_model;
    emit_report(doc, timer, a.out);
    return;
  }

  PruneResult result;
  if (a.method == "f" || a.method == "s") {
    if (a.stats.empty()) fail(ErrorCode::Argument, a.method + "-prune needs --stats");
    if (!(a.keep_ratio > 0.0)) fail(ErrorCode::Argument, a.method + "-prune needs --keep-ratio");
    CalibrationStats stats = load_stats(a.stats);
    result = a.method == "f" ? f_prune(stats, a.keep_ratio) : s_prune(stats, a.keep_ratio);
    doc["meta"]["keep_ratio"] = a.keep_ratio;
  } else if (a.method == "o" || a.method == "o-sampled") {
    if (a.batch.empty()) fail(ErrorCode::Argument, "o-prune needs --batch");
    if (a.budget < 1) fail(ErrorCode::Argument, "o-prune needs --budget");
    TokenBatch batch = load_batch(a.batch);
    OPruneOptions opts;
    opts.keep = a.budget;
    opts.sampled = a.method == "o-sampled";
    opts.samples = a.samples;
    opts.seed = a.seed;
    opts.end_to_end = a.objective == "end2end";
    if (a.objective != "layer" && a.objective != "end2end")
      fail(ErrorCode::Argument, "unknown objective " + a.objective);
    result = o_prune(model, batch, opts);
    doc["meta"]["budget"] = a.budget;
    doc["meta"]["objective"] = a.objective;
    if (opts.sampled) {
      doc["meta"]["samples"] = a.samples;
      doc["meta"]["seed"] = a.seed;
    }
  } else {
    fail(ErrorCode::Argument, "unknown method " + a.method);
  }

  MoeModel pruned = apply_prune(model, result);
  save_checkpoint(pruned, a.out_model);
  json layers = json::array();
  for (const LayerPrune& lp : result.layers) {
    json jl;
    jl["kept"] = lp.kept;
    if (a.method == "o" || a.method == "o-sampled") jl["objective"] = lp.objective;
    layers.push_back(std::move(jl));
  }
  doc["layers"] = std::move(layers);
  doc["model_path"] = a.out_model;
  emit_report(doc, timer, a.out);
}

// ---- eval ----------------------------------------------------------------

struct EvalArgs {
  std::string orig, reduced, batch, stats, clusters, out;
};

void run_eval(const EvalArgs& a) {
  Timer timer;
  MoeModel orig = load_checkpoint(a.orig);
  MoeModel reduced = load_checkpoint(a.reduced);
  TokenBatch batch = load_batch(a.batch);

  QualityReport q = output_fidelity(orig, reduced, batch);

  json doc = report_head("eval");
  json per_layer = json::array();

  // Cluster metrics when an assignment and calibration features are given.
  if (!a.stats.empty() && !a.clusters.empty()) {
    CalibrationStats stats = load_stats(a.stats);
    std::vector<ClusterAssignment> assignments = assignments_from_json(load_json_file(a.clusters));
    if (assignments.size() != stats.layers.size())
      fail(ErrorCode::Argument, "cluster report does not match stats layers");
    double se = 0.0, sc = 0.0, de = 0.0, dc = 0.0;
    for (size_t l = 0; l < assignments.size(); ++l) {
      FeatureMatrix f = expert_output_features(stats, static_cast<int>(l));
      double s1 = silhouette(f.rows, assignments[l], false);
      double s2 = silhouette(f.rows, assignments[l], true);
      double d1 = assignments[l].r >= 2 ? dunn_index(f.rows, assignments[l], false) : 0.0;
      double d2 = assignments[l].r >= 2 ? dunn_index(f.rows, assignments[l], true) : 0.0;
      per_layer.push_back({{"silhouette_euclidean", s1},
                           {"silhouette_cosine", s2},
                           {"dunn_euclidean", d1},
                           {"dunn_cosine", d2}});
      se += s1;
      sc += s2;
      de += d1;
      dc += d2;
    }
    size_t L = assignments.size();
    q.silhouette_euclidean = se / L;
    q.silhouette_cosine = sc / L;
    q.dunn_euclidean = de / L;
    q.dunn_cosine = dc / L;
  }

  // Jensen slack for merged models sharing the original routing slots.
  bool jensen_ok = orig.layers.size() == reduced.layers.size();
  for (size_t l = 0; jensen_ok && l < orig.layers.size(); ++l)
    jensen_ok = orig.layers[l].slots() == reduced.layers[l].slots();
  if (jensen_ok && !orig.layers.empty()) {
    double min_slack = std::numeric_limits<double>::infinity();
    Mat cur = batch.x;
    for (size_t l = 0; l < orig.layers.size(); ++l) {
      const MoeLayer& lo = orig.layers[l];
      Mat next(cur.rows, orig.d_h);
      for (int t = 0; t < cur.rows; ++t) {
        JensenCheck jc = jensen_check(lo, reduced.layers[l], orig.d_h, orig.d_m, cur.row(t));
        min_slack = std::min(min_slack, jc.bound - jc.error);
        smoe_forward(lo, orig.d_h, orig.d_m, cur.row(t), next.row(t));
      }
      cur = std::move(next);
    }
    q.jensen_slack_min = min_slack;
  }

  doc["quality"] = quality_to_json(q);
  if (!per_layer.empty()) doc["cluster_metrics_per_layer"] = std::move(per_layer);
  emit_report(doc, timer, a.out);
}

// ---- oracle ----------------------------------------------------------------

struct OracleArgs {
  std::string stats, out;
  int budget = 0;
};

void run_oracle(const OracleArgs& a) {
  Timer timer;
  CalibrationStats stats = load_stats(a.stats);
  if (a.budget < 1) fail(ErrorCode::Argument, "oracle needs --budget");

  json doc = report_head("oracle");
  doc["meta"]["budget"] = a.budget;
  json layers = json::array();
  for (size_t l = 0; l < stats.layers.size(); ++l) {
    FeatureMatrix f = expert_output_features(stats, static_cast<int>(l));
    OptPartition opt = opt_partition_oracle(f.rows, a.budget);
    DistMatrix d = distance_matrix(f.rows);
    ClusterAssignment hc = hierarchical_cluster(d, a.budget, Linkage::Average);
    double hc_cost = partition_cost(f.rows, hc.labels, hc.r);
    json jl;
    jl["opt_cost"] = opt.cost;
    jl["opt_labels"] = opt.labels;
    jl["enumerated"] = opt.enumerated;
    jl["stirling"] = stirling2(f.rows.rows, a.budget);
    jl["hc_cost"] = hc_cost;
    jl["hc_labels"] = hc.labels;
    jl["ratio"] = opt.cost > 0.0 ? hc_cost / opt.cost : (hc_cost == 0.0 ? 1.0 : 1e12);
    layers.push_back(std::move(jl));
  }
  doc["layers"] = std::move(layers);
  emit_report(doc, timer, a.out);
}

// ---- params ----------------------------------------------------------------

struct ParamsArgs {
  std::string model, reduced, out;
  int layers = 0, experts = 0, d_h = 0, d_m = 0;
  double total = 0.0;
  std::vector<int> after;
};

std::uint64_t expert_params(std::uint64_t layers, std::uint64_t experts, std::uint64_t d_h,
                            std::uint64_t d_m) {
  return layers * experts * 3ULL * d_h * d_m;
}

std::uint64_t model_expert_params(const MoeModel& m) {
  std::uint64_t total = 0;
  for (const MoeLayer& layer : m.layers)
    total += static_cast<std::uint64_t>(layer.stored()) * 3ULL * m.d_h * m.d_m;
  return total;
}

void run_params(const ParamsArgs& a) {
  Timer timer;
  json doc = report_head("params");

  if (!a.model.empty()) {
    MoeModel m = load_checkpoint(a.model);
    std::uint64_t orig = model_expert_params(m);
    doc["expert_params"] = orig;
    std::uint64_t router = 0;
    for (const MoeLayer& layer : m.layers) router += layer.router.size();
    doc["router_params"] = router;
    if (!a.reduced.empty()) {
      MoeModel r = load_checkpoint(a.reduced);
      std::uint64_t red = model_expert_params(r);
      doc["reduced_expert_params"] = red;
      doc["expert_param_ratio"] = static_cast<double>(red) / static_cast<double>(orig);
    }
    emit_report(doc, timer, a.out);
    return;
  }

  if (a.layers < 1 || a.experts < 1 || a.d_h < 1 || a.d_m < 1)
    fail(ErrorCode::Argument, "params needs --model or all of --layers --experts --d-h --d-m");
  std::uint64_t experts_block = expert_params(a.layers, a.experts, a.d_h, a.d_m);
  doc["expert_params"] = experts_block;
  doc["meta"]["layers"] = a.layers;
  doc["meta"]["experts"] = a.experts;
  doc["meta"]["d_h"] = a.d_h;
  doc["meta"]["d_m"] = a.d_m;

  double shared = 0.0;
  if (a.total > 0.0) {
    shared = a.total - static_cast<double>(experts_block);
    if (shared < 0.0)
      fail(ErrorCode::Argument, "computed expert parameters exceed the published total");
    doc["total_params"] = a.total;
    doc["shared_params"] = shared;
  }

  json after = json::array();
  for (int r : a.after) {
    if (r < 1 || r > a.experts) fail(ErrorCode::Argument, "--after values must lie in [1, experts]");
    std::uint64_t block = expert_params(a.layers, r, a.d_h, a.d_m);
    json jr;
    jr["experts"] = r;
    jr["expert_params"] = block;
    jr["expert_param_ratio"] = static_cast<double>(block) / static_cast<double>(experts_block);
    if (a.total > 0.0) jr["total_params"] = shared + static_cast<double>(block);
    after.push_back(std::move(jr));
  }
  if (!after.empty()) doc["after"] = std::move(after);
  emit_report(doc, timer, a.out);
}

}  // namespace

int run(int argc, const char* const* argv) {
  thread_cap();  // honor MOEKIT_THREADS before any kernel runs

  CLI::App app{"SMoE expert clustering, merging and pruning toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  CLI::App* sub_gen = app.add_subcommand("gen", "generate a planted-redundancy model and batch");
  sub_gen->add_option("--spec", gen.spec_path, "KEY=VALUE spec file");
  sub_gen->add_option("--seed", gen.seed, "override the spec seed");
  sub_gen->add_option("--tokens", gen.tokens, "override the spec token count");
  sub_gen->add_option("--out-model", gen.out_model, "checkpoint output path")->required();
  sub_gen->add_option("--out-batch", gen.out_batch, "token batch output path");
  sub_gen->add_option("--out", gen.out, "report path (stdout when absent)");
  sub_gen->callback([&] { run_gen(gen); });

  CalibrateArgs cal;
  CLI::App* sub_cal = app.add_subcommand("calibrate", "collect routing statistics and mean outputs");
  sub_cal->add_option("--model", cal.model)->required();
  sub_cal->add_option("--batch", cal.batch)->required();
  sub_cal->add_option("--out-stats", cal.out_stats, "stats JSON output path")->required();
  sub_cal->add_flag("--cache-activations", cal.cache_activations,
                    "exercise the activation cache (guarded; caches stay in memory)");
  sub_cal->add_option("--act-cache-limit", cal.act_limit, "activation cache byte limit");
  sub_cal->add_option("--out", cal.out, "report path (stdout when absent)");
  sub_cal->callback([&] { run_calibrate(cal); });

  ClusterArgs clu;
  CLI::App* sub_clu = app.add_subcommand("cluster", "group experts per layer");
  sub_clu->add_option("--model", clu.model);
  sub_clu->add_option("--stats", clu.stats);
  sub_clu->add_option("--metric", clu.metric, "eo | rl | rl-profile | weight");
  sub_clu->add_option("--method", clu.method, "hc | kmeans | kmeans-random | fcm");
  sub_clu->add_option("--linkage", clu.linkage, "single | complete | average");
  sub_clu->add_option("--budget", clu.budget, "clusters per layer");
  sub_clu->add_option("--non-uniform", clu.non_uniform, "global keep ratio for per-layer budgets");
  sub_clu->add_option("--seed", clu.seed, "seed for kmeans-random");
  sub_clu->add_option("--fcm-m", clu.fcm_m, "fuzzifier");
  sub_clu->add_option("--fcm-tol", clu.fcm_tol);
  sub_clu->add_option("--max-iter", clu.max_iter);
  sub_clu->add_option("--out", clu.out, "report path (stdout when absent)");
  sub_clu->callback([&] { run_cluster(clu); });

  MergeArgs mrg;
  CLI::App* sub_mrg = app.add_subcommand("merge", "merge clustered experts in weight space");
  sub_mrg->add_option("--model", mrg.model)->required();
  sub_mrg->add_option("--clusters", mrg.clusters, "cluster report JSON")->required();
  sub_mrg->add_option("--strategy", mrg.strategy, "average | frequency | fixdom | soft");
  sub_mrg->add_option("--stats", mrg.stats, "calibration stats (frequency weights, dominants)");
  sub_mrg->add_option("--batch", mrg.batch, "calibration batch (fixdom activation features)");
  sub_mrg->add_option("--fixdom-features", mrg.fixdom_features, "act | weight | act+weight");
  sub_mrg->add_option("--out-model", mrg.out_model)->required();
  sub_mrg->add_option("--out", mrg.out, "report path (stdout when absent)");
  sub_mrg->callback([&] { run_merge(mrg); });

  PruneArgs prn;
  CLI::App* sub_prn = app.add_subcommand("prune", "drop or regroup experts");
  sub_prn->add_option("--model", prn.model)->required();
  sub_prn->add_option("--batch", prn.batch);
  sub_prn->add_option("--stats", prn.stats);
  sub_prn->add_option("--method", prn.method, "f | s | o | o-sampled | msmoe")->required();
  sub_prn->add_option("--keep-ratio", prn.keep_ratio);
  sub_prn->add_option("--budget", prn.budget, "survivors (o) or clusters (msmoe) per layer");
  sub_prn->add_option("--samples", prn.samples, "distinct subsets for o-sampled");
  sub_prn->add_option("--seed", prn.seed);
  sub_prn->add_option("--objective", prn.objective, "layer | end2end");
  sub_prn->add_option("--out-model", prn.out_model)->required();
  sub_prn->add_option("--out", prn.out, "report path (stdout when absent)");
  sub_prn->callback([&] { run_prune(prn); });

  EvalArgs evl;
  CLI::App* sub_evl = app.add_subcommand("eval", "fidelity, cluster metrics and bound slack");
  sub_evl->add_option("--orig", evl.orig)->required();
  sub_evl->add_option("--reduced", evl.reduced)->required();
  sub_evl->add_option("--batch", evl.batch)->required();
  sub_evl->add_option("--stats", evl.stats);
  sub_evl->add_option("--clusters", evl.clusters);
  sub_evl->add_option("--out", evl.out, "report path (stdout when absent)");
  sub_evl->callback([&] { run_eval(evl); });

  OracleArgs orc;
  CLI::App* sub_orc = app.add_subcommand("oracle", "exact partition optimum per layer");
  sub_orc->add_option("--stats", orc.stats)->required();
  sub_orc->add_option("--budget", orc.budget)->required();
  sub_orc->add_option("--out", orc.out, "report path (stdout when absent)");
  sub_orc->callback([&] { run_oracle(orc); });

  ParamsArgs par;
  CLI::App* sub_par = app.add_subcommand("params", "parameter accounting");
  sub_par->add_option("--model", par.model);
  sub_par->add_option("--reduced", par.reduced);
  sub_par->add_option("--layers", par.layers);
  sub_par->add_option("--experts", par.experts);
  sub_par->add_option("--d-h", par.d_h);
  sub_par->add_option("--d-m", par.d_m);
  sub_par->add_option("--total-params", par.total, "published total parameter count");
  sub_par->add_option("--after", par.after, "expert counts after reduction (repeatable)");
  sub_par->add_option("--out", par.out, "report path (stdout when absent)");
  sub_par->callback([&] { run_params(par); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    json err = {{"error", {{"code", "usage"}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return 2;
  } catch (const Error& e) {
    json err = {{"error", {{"code", error_code_name(e.code())}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    json err = {{"error", {{"code", "internal"}, {"message", e.what()}}}};
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace moekit::cli
