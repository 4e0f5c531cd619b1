// Compares the OpenMP kernels against the serial reference lane.
// Not wired into ctest; run manually: build/bench/moekit_bench [tokens]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <string>

#include "moekit/calibration.hpp"
#include "moekit/clustering.hpp"
#include "moekit/forward.hpp"
#include "moekit/reference.hpp"
#include "moekit/synth.hpp"
#include "moekit/threading.hpp"

using namespace moekit;

namespace {

double time_ms(void (*fn)(const MoeModel&, const TokenBatch&, Mat&), const MoeModel& m,
               const TokenBatch& b, Mat& out, int reps) {
  double best = 1e300;
  for (int i = 0; i < reps; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    fn(m, b, out);
    auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

void forward_omp(const MoeModel& m, const TokenBatch& b, Mat& out) { out = model_forward(m, b); }
void forward_ref(const MoeModel& m, const TokenBatch& b, Mat& out) {
  out = ref::model_forward(m, b);
}

}  // namespace

int main(int argc, char** argv) {
  int tokens = argc > 1 ? std::atoi(argv[1]) : 2048;
  if (tokens < 1) tokens = 2048;

  PlantedSpec spec;
  spec.layers = 4;
  spec.experts = 16;
  spec.groups = 4;
  spec.d_h = 64;
  spec.d_m = 128;
  spec.top_k = 2;
  spec.sigma = 0.05;
  spec.tokens = tokens;
  MoeModel model = gen_planted_model(spec);
  TokenBatch batch = gen_batch(spec, tokens);

  std::printf("threads: %d, tokens: %d, layers: %d, experts: %d\n", thread_cap(), tokens,
              spec.layers, spec.experts);

  Mat out_omp, out_ref;
  double t_omp = time_ms(forward_omp, model, batch, out_omp, 3);
  double t_ref = time_ms(forward_ref, model, batch, out_ref, 3);
  double max_dev = 0.0;
  for (size_t i = 0; i < out_omp.data.size(); ++i)
    max_dev = std::max(max_dev, static_cast<double>(std::abs(out_omp.data[i] - out_ref.data[i])));
  std::printf("model_forward   omp %8.2f ms   ref %8.2f ms   speedup %5.2fx   max |dev| %.3e\n",
              t_omp, t_ref, t_ref / t_omp, max_dev);

  auto t0 = std::chrono::steady_clock::now();
  CalibrationStats stats = collect_stats(model, batch);
  auto t1 = std::chrono::steady_clock::now();
  std::printf("collect_stats   omp %8.2f ms\n",
              std::chrono::duration<double, std::milli>(t1 - t0).count());

  FeatureMatrix f = expert_output_features(stats, 0);
  t0 = std::chrono::steady_clock::now();
  DistMatrix d_omp = distance_matrix(f.rows);
  t1 = std::chrono::steady_clock::now();
  DistMatrix d_ref = ref::distance_matrix(f.rows);
  auto t2 = std::chrono::steady_clock::now();
  double dd = 0.0;
  for (size_t i = 0; i < d_omp.d.size(); ++i) dd = std::max(dd, std::abs(d_omp.d[i] - d_ref.d[i]));
  std::printf("distance_matrix omp %8.2f ms   ref %8.2f ms   max |dev| %.3e\n",
              std::chrono::duration<double, std::milli>(t1 - t0).count(),
              std::chrono::duration<double, std::milli>(t2 - t1).count(), dd);
  return 0;
}
