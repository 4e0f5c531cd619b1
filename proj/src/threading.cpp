#include "moekit/threading.hpp"

#include <omp.h>

#include <atomic>
#include <cstdlib>

namespace moekit {

namespace {

std::atomic<int> g_cap{0};

int init_cap() {
  int cap = omp_get_max_threads();
  if (const char* env = std::getenv("MOEKIT_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1 && v < cap) cap = v;
  }
  return cap < 1 ? 1 : cap;
}

}  // namespace

int thread_cap() {
  int cap = g_cap.load(std::memory_order_relaxed);
  if (cap == 0) {
    cap = init_cap();
    g_cap.store(cap, std::memory_order_relaxed);
  }
  return cap;
}

void set_thread_cap(int n) { g_cap.store(n < 1 ? 1 : n, std::memory_order_relaxed); }

}  // namespace moekit
