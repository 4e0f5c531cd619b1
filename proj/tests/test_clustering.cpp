#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include <doctest.h>

#include "helpers.hpp"
#include "moekit/clustering.hpp"
#include "moekit/reference.hpp"
#include "moekit/synth.hpp"

using namespace moekit;
using namespace testutil;

namespace {

Mat points_1d(std::vector<float> xs) {
  Mat m(static_cast<int>(xs.size()), 1);
  for (size_t i = 0; i < xs.size(); ++i) m.at(static_cast<int>(i), 0) = xs[i];
  return m;
}

// Brute-force linkage distance between two member sets.
double oracle_linkage(const DistMatrix& d, const std::vector<int>& a, const std::vector<int>& b,
                      Linkage lk) {
  double best_min = 1e300, best_max = -1e300, sum = 0.0;
  for (int i : a)
    for (int j : b) {
      double v = d.at(i, j);
      best_min = std::min(best_min, v);
      best_max = std::max(best_max, v);
      sum += v;
    }
  switch (lk) {
    case Linkage::Single: return best_min;
    case Linkage::Complete: return best_max;
    case Linkage::Average: return sum / (static_cast<double>(a.size()) * b.size());
  }
  return 0.0;
}

}  // namespace

TEST_SUITE("clustering") {

TEST_CASE("feature builders expose the documented rows") {
  Rng rng(41, 0);
  MoeModel m = random_model(rng, 1, 3, 4, 4, 2);
  TokenBatch batch = random_batch(rng, 8, 3);
  CalibrationStats stats = collect_stats(m, batch);

  FeatureMatrix eo = expert_output_features(stats, 0);
  CHECK(eo.kind == FeatureKind::ExpertOutput);
  CHECK(bitwise_equal(eo.rows, stats.layers[0].mean_output));

  FeatureMatrix rl = router_weight_column_features(m, 0);
  REQUIRE(rl.rows.rows == 4);
  REQUIRE(rl.rows.cols == 3);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) CHECK(rl.rows.at(i, j) == m.layers[0].router.at(j, i));

  FeatureMatrix prof = router_logit_profile_features(stats, 0);
  CHECK(bitwise_equal(prof.rows, stats.layers[0].mean_selected_logits));

  FeatureMatrix w = weight_features(m, 0);
  REQUIRE(w.rows.rows == 4);
  REQUIRE(w.rows.cols == 3 * 3 * 4);
  // first block is the flattened w_gate
  CHECK(w.rows.at(2, 0) == m.layers[0].experts[2].w_gate.data[0]);
}

TEST_CASE("distance matrix on a line") {
  Mat f = points_1d({0.0f, 3.0f, 7.0f});
  DistMatrix d = distance_matrix(f);
  CHECK(d.at(0, 1) == doctest::Approx(3.0));
  CHECK(d.at(1, 2) == doctest::Approx(4.0));
  CHECK(d.at(0, 2) == doctest::Approx(7.0));
  CHECK(d.at(2, 0) == d.at(0, 2));
  CHECK(d.at(1, 1) == 0.0);
}

TEST_CASE("non-finite features are rejected") {
  Mat f = points_1d({0.0f, 1.0f});
  f.at(0, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK(thrown_code([&] { distance_matrix(f); }) == ErrorCode::Argument);
}

TEST_CASE("three points on a line cluster by proximity under every linkage") {
  Mat f = points_1d({0.0f, 1.0f, 10.0f});
  DistMatrix d = distance_matrix(f);
  for (Linkage lk : {Linkage::Single, Linkage::Complete, Linkage::Average}) {
    ClusterAssignment a = hierarchical_cluster(d, 2, lk);
    CHECK(a.labels == std::vector<int>{0, 0, 1});
    REQUIRE(a.merge_trace.size() == 1);
    CHECK(a.merge_trace[0].a == 0);
    CHECK(a.merge_trace[0].b == 1);
    CHECK(a.merge_trace[0].dist == doctest::Approx(1.0));
  }
}

TEST_CASE("r = n is the identity and r = 1 is one cluster") {
  Rng rng(42, 0);
  Mat f = random_mat(rng, 5, 3);
  DistMatrix d = distance_matrix(f);
  ClusterAssignment idn = hierarchical_cluster(d, 5, Linkage::Average);
  CHECK(idn.labels == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(idn.merge_trace.empty());
  ClusterAssignment one = hierarchical_cluster(d, 1, Linkage::Average);
  CHECK(one.labels == std::vector<int>(5, 0));
  CHECK(one.merge_trace.size() == 4);
  CHECK(thrown_code([&] { hierarchical_cluster(d, 0, Linkage::Average); }) == ErrorCode::Argument);
  CHECK(thrown_code([&] { hierarchical_cluster(d, 6, Linkage::Average); }) == ErrorCode::Argument);
}

TEST_CASE("hierarchical clustering is deterministic") {
  Rng rng(43, 0);
  Mat f = random_mat(rng, 12, 4);
  DistMatrix d = distance_matrix(f);
  ClusterAssignment a = hierarchical_cluster(d, 3, Linkage::Complete);
  ClusterAssignment b = hierarchical_cluster(d, 3, Linkage::Complete);
  CHECK(a.labels == b.labels);
  REQUIRE(a.merge_trace.size() == b.merge_trace.size());
  for (size_t i = 0; i < a.merge_trace.size(); ++i) {
    CHECK(a.merge_trace[i].a == b.merge_trace[i].a);
    CHECK(a.merge_trace[i].b == b.merge_trace[i].b);
    CHECK(a.merge_trace[i].dist == b.merge_trace[i].dist);
  }
}

TEST_CASE("merge distances never decrease") {
  Rng rng(44, 0);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 3 + static_cast<int>(rng.next_below(14));
    Mat f = random_mat(rng, n, 3);
    DistMatrix d = distance_matrix(f);
    for (Linkage lk : {Linkage::Single, Linkage::Complete, Linkage::Average}) {
      ClusterAssignment a = hierarchical_cluster(d, 1, lk);
      for (size_t i = 1; i < a.merge_trace.size(); ++i)
        CHECK(a.merge_trace[i].dist >= a.merge_trace[i - 1].dist - 1e-12);
    }
  }
}

TEST_CASE("every merge step matches a brute-force rescan") {
  Rng rng(45, 0);
  for (int trial = 0; trial < 60; ++trial) {
    int n = 3 + static_cast<int>(rng.next_below(6));  // <= 8
    Mat f = random_mat(rng, n, 2);
    DistMatrix d = distance_matrix(f);
    for (Linkage lk : {Linkage::Single, Linkage::Complete, Linkage::Average}) {
      ClusterAssignment a = hierarchical_cluster(d, 1, lk);
      REQUIRE(a.merge_trace.size() == static_cast<size_t>(n - 1));

      // Replay with an independent cluster table keyed by min member index.
      std::map<int, std::vector<int>> clusters;
      for (int i = 0; i < n; ++i) clusters[i] = {i};
      for (const MergeStep& step : a.merge_trace) {
        int best_a = -1, best_b = -1;
        double best = 1e300;
        for (auto ia = clusters.begin(); ia != clusters.end(); ++ia)
          for (auto ib = std::next(ia); ib != clusters.end(); ++ib) {
            double v = oracle_linkage(d, ia->second, ib->second, lk);
            if (v < best) {  // map iteration is ascending, so first hit is the smallest pair
              best = v;
              best_a = ia->first;
              best_b = ib->first;
            }
          }
        CHECK(step.a == best_a);
        CHECK(step.b == best_b);
        CHECK(step.dist == doctest::Approx(best).epsilon(1e-12).scale(1.0));
        auto& dst = clusters[best_a];
        auto& src = clusters[best_b];
        dst.insert(dst.end(), src.begin(), src.end());
        clusters.erase(best_b);
      }
    }
  }
}

TEST_CASE("cluster_members groups indices by label") {
  ClusterAssignment a;
  a.labels = {0, 1, 0, 2, 1};
  a.r = 3;
  auto members = cluster_members(a);
  REQUIRE(members.size() == 3);
  CHECK(members[0] == std::vector<int>{0, 2});
  CHECK(members[1] == std::vector<int>{1, 4});
  CHECK(members[2] == std::vector<int>{3});
}

TEST_CASE("kmeans recovers separated blobs from distinct seeds") {
  Mat f = points_1d({0.0f, 10.0f, 20.0f, 0.1f, 10.1f, 20.3f});
  ClusterAssignment a = kmeans_cluster(f, 3, KmeansInit::FixedFirstR);
  CHECK(a.r == 3);
  CHECK(a.labels == std::vector<int>{0, 1, 2, 0, 1, 2});
}

TEST_CASE("kmeans random init is deterministic in the seed") {
  Rng rng(46, 0);
  Mat f = random_mat(rng, 10, 3);
  ClusterAssignment a = kmeans_cluster(f, 3, KmeansInit::Random, 7);
  ClusterAssignment b = kmeans_cluster(f, 3, KmeansInit::Random, 7);
  CHECK(a.labels == b.labels);
}

TEST_CASE("kmeans on identical points collapses to one cluster") {
  Mat f = points_1d({2.0f, 2.0f, 2.0f, 2.0f});
  ClusterAssignment a = kmeans_cluster(f, 2, KmeansInit::FixedFirstR);
  CHECK(a.r == 1);
  CHECK(a.labels == std::vector<int>(4, 0));
}

TEST_CASE("kmeans labels stay valid and nonempty") {
  Rng rng(47, 0);
  for (int trial = 0; trial < 50; ++trial) {
    int n = 2 + static_cast<int>(rng.next_below(10));
    int r = 1 + static_cast<int>(rng.next_below(n));
    Mat f = random_mat(rng, n, 2);
    ClusterAssignment a = kmeans_cluster(f, r, KmeansInit::Random, trial);
    REQUIRE(a.r >= 1);
    REQUIRE(a.r <= r);
    std::vector<int> count(a.r, 0);
    for (int lab : a.labels) {
      REQUIRE(lab >= 0);
      REQUIRE(lab < a.r);
      count[lab]++;
    }
    for (int c : count) CHECK(c > 0);
  }
}

TEST_CASE("fcm splits two far pairs crisply") {
  Mat f = points_1d({0.0f, 1.0f, 10.0f, 11.0f});
  FcmResult res = fcm_cluster(f, 2);
  REQUIRE(res.membership.u.rows == 4);
  REQUIRE(res.membership.u.cols == 2);
  for (int i = 0; i < 4; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 2; ++j) sum += res.membership.u.at(i, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
  ClusterAssignment hard = harden_membership(res.membership);
  CHECK(hard.labels == std::vector<int>{0, 0, 1, 1});
  // objective decreases monotonically
  for (size_t i = 1; i < res.objective.size(); ++i)
    CHECK(res.objective[i] <= res.objective[i - 1] + 1e-8);
}

TEST_CASE("fcm with r = n puts each distinct point in its own cluster") {
  Mat f = points_1d({0.0f, 5.0f, 9.0f});
  FcmResult res = fcm_cluster(f, 3);
  ClusterAssignment hard = harden_membership(res.membership);
  CHECK(hard.labels == std::vector<int>{0, 1, 2});
  for (int i = 0; i < 3; ++i) CHECK(res.membership.u.at(i, i) == doctest::Approx(1.0));
}

TEST_CASE("harden_membership breaks ties toward the lower cluster and compacts") {
  Membership ms;
  ms.u = Mat(3, 3);
  ms.u.at(0, 0) = 0.5f;
  ms.u.at(0, 2) = 0.5f;  // tie -> cluster 0
  ms.u.at(1, 2) = 1.0f;
  ms.u.at(2, 2) = 1.0f;  // cluster 1 stays empty -> compacted away
  ClusterAssignment a = harden_membership(ms);
  CHECK(a.r == 2);
  CHECK(a.labels == std::vector<int>{0, 1, 1});
}

TEST_CASE("non-uniform budgets follow the global frequency ranking") {
  CalibrationStats stats;
  stats.tokens = 10;
  LayerStats l0, l1;
  l0.n = 4;
  l0.frequency = {9, 8, 7, 1};
  l1.n = 4;
  l1.frequency = {6, 5, 1, 1};
  stats.layers = {l0, l1};
  CHECK(non_uniform_budgets(stats, 0.5) == std::vector<int>{3, 1});

  // frequency ties rank toward the lower layer, so layer 0 takes the whole
  // budget and the clamp hands one cluster back
  LayerStats e0, e1;
  e0.n = 4;
  e0.frequency = {2, 2, 2, 2};
  e1.n = 4;
  e1.frequency = {2, 2, 2, 2};
  CalibrationStats eq;
  eq.layers = {e0, e1};
  CHECK(non_uniform_budgets(eq, 0.5) == std::vector<int>{3, 1});

  // interleaved frequencies split evenly
  LayerStats i0, i1;
  i0.n = 2;
  i0.frequency = {4, 3};
  i1.n = 2;
  i1.frequency = {4, 3};
  CalibrationStats iv;
  iv.layers = {i0, i1};
  CHECK(non_uniform_budgets(iv, 0.5) == std::vector<int>{1, 1});
}

TEST_CASE("layers ranked out of the budget are clamped to one cluster") {
  CalibrationStats stats;
  LayerStats l0, l1;
  l0.n = 2;
  l0.frequency = {10, 9};
  l1.n = 2;
  l1.frequency = {0, 0};
  stats.layers = {l0, l1};
  CHECK(non_uniform_budgets(stats, 0.5) == std::vector<int>{1, 1});
}

TEST_CASE("planted structure is recovered from mean outputs") {
  PlantedSpec spec;
  spec.layers = 1;
  spec.experts = 8;
  spec.groups = 4;
  spec.d_h = 16;
  spec.d_m = 16;
  spec.sigma = 0.01;
  spec.seed = 5;
  MoeModel m = gen_planted_model(spec);
  TokenBatch batch = gen_batch(spec, 128);
  CalibrationStats stats = collect_stats(m, batch);
  FeatureMatrix f = expert_output_features(stats, 0);
  DistMatrix d = distance_matrix(f.rows);
  ClusterAssignment a = hierarchical_cluster(d, 4, Linkage::Average);
  CHECK(a.labels == planted_labels(spec));
  ClusterAssignment km = kmeans_cluster(f.rows, 4, KmeansInit::FixedFirstR);
  CHECK(km.labels == planted_labels(spec));
}

}  // TEST_SUITE
