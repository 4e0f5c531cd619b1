#pragma once

namespace moekit {

// Maximum OpenMP threads the kernels may use. Initialized lazily from the
// MOEKIT_THREADS environment variable (clamped to >= 1), defaulting to the
// OpenMP runtime maximum. set_thread_cap overrides both.
int thread_cap();
void set_thread_cap(int n);

}  // namespace moekit
