#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "helpers.hpp"
#include "moekit/cli.hpp"
#include "moekit/io.hpp"

using namespace testutil;
using nlohmann::json;

namespace {

int run_cli(std::initializer_list<std::string> args) {
  std::vector<std::string> owned{"moekit"};
  owned.insert(owned.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const std::string& s : owned) argv.push_back(s.c_str());
  return moekit::cli::run(static_cast<int>(argv.size()), argv.data());
}

struct CaptureStderr {
  std::ostringstream out;
  std::streambuf* old;
  CaptureStderr() : old(std::cerr.rdbuf(out.rdbuf())) {}
  ~CaptureStderr() { std::cerr.rdbuf(old); }
};

json read_json(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  json j;
  in >> j;
  return j;
}

void write_spec(const std::string& path) {
  std::ofstream out(path);
  out << "layers=2\nexperts=8\ngroups=4\nd_h=16\nd_m=16\ntop_k=2\nsigma=0.02\nseed=3\n"
         "tokens=96\n";
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("missing subcommand is a usage error") {
  CaptureStderr cap;
  CHECK(run_cli({}) == 2);
  json err = json::parse(cap.out.str());
  CHECK(err.at("error").at("code") == "usage");
}

TEST_CASE("unknown flags are usage errors") {
  CaptureStderr cap;
  CHECK(run_cli({"gen", "--bogus", "1"}) == 2);
}

TEST_CASE("missing input files fail with an io error code") {
  std::string dir = temp_dir("cli_missing");
  CaptureStderr cap;
  int rc = run_cli({"calibrate", "--model", dir + "/nope.smck", "--batch", dir + "/nope.f32mat",
                    "--out-stats", dir + "/s.json"});
  CHECK(rc == 1);
  json err = json::parse(cap.out.str());
  CHECK(err.at("error").at("code") == "io");
}

TEST_CASE("library errors surface their code") {
  std::string dir = temp_dir("cli_liberr");
  write_spec(dir + "/spec.cfg");
  REQUIRE(run_cli({"gen", "--spec", dir + "/spec.cfg", "--out-model", dir + "/m.smck",
                   "--out-batch", dir + "/b.f32mat", "--out", dir + "/gen.json"}) == 0);
  CaptureStderr cap;
  int rc = run_cli({"cluster", "--model", dir + "/m.smck", "--metric", "eo", "--budget", "4",
                    "--out", dir + "/c.json"});
  CHECK(rc == 1);  // eo needs --stats
  json err = json::parse(cap.out.str());
  CHECK(err.at("error").at("code") == "argument");
}

TEST_CASE("the full pipeline runs and reports are well formed") {
  std::string dir = temp_dir("cli_pipeline");
  write_spec(dir + "/spec.cfg");
  CHECK(run_cli({"gen", "--spec", dir + "/spec.cfg", "--out-model", dir + "/m.smck",
                 "--out-batch", dir + "/b.f32mat", "--out", dir + "/gen.json"}) == 0);
  CHECK(run_cli({"calibrate", "--model", dir + "/m.smck", "--batch", dir + "/b.f32mat",
                 "--out-stats", dir + "/stats.json", "--out", dir + "/cal.json"}) == 0);
  CHECK(run_cli({"cluster", "--model", dir + "/m.smck", "--stats", dir + "/stats.json",
                 "--metric", "eo", "--method", "hc", "--linkage", "average", "--budget", "4",
                 "--out", dir + "/clusters.json"}) == 0);
  CHECK(run_cli({"merge", "--model", dir + "/m.smck", "--clusters", dir + "/clusters.json",
                 "--strategy", "frequency", "--stats", dir + "/stats.json", "--out-model",
                 dir + "/merged.smck", "--out", dir + "/merge.json"}) == 0);
  CHECK(run_cli({"eval", "--orig", dir + "/m.smck", "--reduced", dir + "/merged.smck",
                 "--batch", dir + "/b.f32mat", "--stats", dir + "/stats.json", "--clusters",
                 dir + "/clusters.json", "--out", dir + "/eval.json"}) == 0);
  CHECK(run_cli({"prune", "--model", dir + "/m.smck", "--stats", dir + "/stats.json",
                 "--method", "f", "--keep-ratio", "0.5", "--out-model", dir + "/fpruned.smck",
                 "--out", dir + "/fprune.json"}) == 0);
  CHECK(run_cli({"oracle", "--stats", dir + "/stats.json", "--budget", "4", "--out",
                 dir + "/oracle.json"}) == 0);

  json gen = read_json(dir + "/gen.json");
  CHECK(gen.at("kind") == "gen_report");
  CHECK(gen.at("planted_labels").size() == 8);

  json clusters = read_json(dir + "/clusters.json");
  CHECK(clusters.at("layers").size() == 2);
  CHECK(clusters.at("layers").at(0).at("labels").size() == 8);
  CHECK(clusters.at("layers").at(0).at("r") == 4);
  // the planted structure makes clustering recover labels i % 4
  CHECK(clusters.at("layers").at(0).at("labels") ==
        json(std::vector<int>{0, 1, 2, 3, 0, 1, 2, 3}));

  json merge = read_json(dir + "/merge.json");
  CHECK(merge.at("plan").at("layers").size() == 2);
  CHECK(merge.at("stored_experts") == json(std::vector<int>{4, 4}));

  json eval = read_json(dir + "/eval.json");
  CHECK(eval.at("quality").at("cosine_sim").get<double>() > 0.9);
  CHECK(eval.at("quality").at("jensen_slack_min").get<double>() >= -1e-6);

  json oracle = read_json(dir + "/oracle.json");
  CHECK(oracle.at("layers").at(0).at("enumerated") == 1701);
  CHECK(oracle.at("layers").at(0).at("stirling") == 1701);

  // merged checkpoint loads and has the reduced shape
  moekit::MoeModel merged = moekit::load_checkpoint(dir + "/merged.smck");
  CHECK(merged.layers[0].stored() == 4);
  CHECK(merged.layers[0].slots() == 8);
}

TEST_CASE("params accounting from explicit dimensions") {
  std::string dir = temp_dir("cli_params");
  CHECK(run_cli({"params", "--layers", "2", "--experts", "4", "--d-h", "8", "--d-m", "16",
                 "--total-params", "10000", "--after", "2", "--out", dir + "/p.json"}) == 0);
  json p = read_json(dir + "/p.json");
  // expert block: 2 layers * 4 experts * 3 * 8 * 16 = 3072
  CHECK(p.at("expert_params") == 3072);
  CHECK(p.at("shared_params") == doctest::Approx(10000.0 - 3072));
  CHECK(p.at("after").at(0).at("expert_params") == 1536);
  CHECK(p.at("after").at(0).at("total_params") == doctest::Approx(6928.0 + 1536));
}

TEST_CASE("params from checkpoints reports the stored ratio") {
  std::string dir = temp_dir("cli_params_model");
  write_spec(dir + "/spec.cfg");
  REQUIRE(run_cli({"gen", "--spec", dir + "/spec.cfg", "--out-model", dir + "/m.smck",
                   "--out-batch", dir + "/b.f32mat", "--out", dir + "/gen.json"}) == 0);
  REQUIRE(run_cli({"calibrate", "--model", dir + "/m.smck", "--batch", dir + "/b.f32mat",
                   "--out-stats", dir + "/stats.json", "--out", dir + "/cal.json"}) == 0);
  REQUIRE(run_cli({"cluster", "--model", dir + "/m.smck", "--stats", dir + "/stats.json",
                   "--budget", "4", "--out", dir + "/c.json"}) == 0);
  REQUIRE(run_cli({"merge", "--model", dir + "/m.smck", "--clusters", dir + "/c.json",
                   "--strategy", "average", "--out-model", dir + "/merged.smck", "--out",
                   dir + "/merge.json"}) == 0);
  CHECK(run_cli({"params", "--model", dir + "/m.smck", "--reduced", dir + "/merged.smck",
                 "--out", dir + "/ratio.json"}) == 0);
  json p = read_json(dir + "/ratio.json");
  CHECK(p.at("expert_param_ratio").get<double>() == doctest::Approx(0.5));
}

}  // TEST_SUITE
