#include "moekit/cli.hpp"

int main(int argc, char** argv) { return moekit::cli::run(argc, argv); }
