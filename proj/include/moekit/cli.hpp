#pragma once

namespace moekit::cli {

// Full command-line entry point. Returns the process exit code; failures
// print a machine-readable error JSON to stderr. Exposed as a library
// function so tests can drive the real CLI in-process.
int run(int argc, const char* const* argv);

}  // namespace moekit::cli
