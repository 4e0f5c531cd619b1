#include "moekit/synth.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "moekit/rng.hpp"

namespace moekit {

namespace {

// Stream tags keep every tensor on its own counter stream, so generation
// order never influences the values.
constexpr std::uint64_t kStreamBase = 1;
constexpr std::uint64_t kStreamNoise = 2;
constexpr std::uint64_t kStreamRouter = 3;
constexpr std::uint64_t kStreamBatch = 4;

std::uint64_t stream_id(std::uint64_t tag, std::uint64_t layer, std::uint64_t index) {
  return (tag << 48) ^ (layer << 24) ^ index;
}

void fill_normal(Mat& m, Rng& rng, double scale) {
  for (float& v : m.data) v = static_cast<float>(rng.next_normal() * scale);
}

long parse_long(const std::string& key, const std::string& value) {
  size_t pos = 0;
  long v = 0;
  try {
    v = std::stol(value, &pos);
  } catch (const std::exception&) {
    fail(ErrorCode::Argument, "spec key " + key + ": not an integer: " + value);
  }
  if (pos != value.size()) fail(ErrorCode::Argument, "spec key " + key + ": trailing characters");
  return v;
}

double parse_double(const std::string& key, const std::string& value) {
  size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    fail(ErrorCode::Argument, "spec key " + key + ": not a number: " + value);
  }
  if (pos != value.size()) fail(ErrorCode::Argument, "spec key " + key + ": trailing characters");
  return v;
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

PlantedSpec parse_planted_spec(const std::string& text) {
  PlantedSpec spec;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorCode::Argument, "spec line is not KEY=VALUE: " + line);
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key == "layers") spec.layers = static_cast<int>(parse_long(key, value));
    else if (key == "experts") spec.experts = static_cast<int>(parse_long(key, value));
    else if (key == "groups") spec.groups = static_cast<int>(parse_long(key, value));
    else if (key == "d_h") spec.d_h = static_cast<int>(parse_long(key, value));
    else if (key == "d_m") spec.d_m = static_cast<int>(parse_long(key, value));
    else if (key == "top_k") spec.top_k = static_cast<int>(parse_long(key, value));
    else if (key == "sigma") spec.sigma = parse_double(key, value);
    else if (key == "seed") spec.seed = static_cast<std::uint64_t>(parse_long(key, value));
    else if (key == "tokens") spec.tokens = static_cast<int>(parse_long(key, value));
    else
      fail(ErrorCode::Argument,
           "unknown spec key '" + key +
               "' (expected layers, experts, groups, d_h, d_m, top_k, sigma, seed, tokens)");
  }
  if (spec.layers < 1 || spec.experts < 1 || spec.groups < 1 || spec.d_h < 1 || spec.d_m < 1 ||
      spec.top_k < 1 || spec.tokens < 1)
    fail(ErrorCode::Argument, "spec values must be positive");
  if (spec.groups > spec.experts) fail(ErrorCode::Argument, "groups cannot exceed experts");
  if (spec.top_k > spec.experts) fail(ErrorCode::Argument, "top_k cannot exceed experts");
  if (spec.sigma < 0.0) fail(ErrorCode::Argument, "sigma must be nonnegative");
  return spec;
}

PlantedSpec load_planted_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open spec file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_planted_spec(buf.str());
}

std::vector<int> planted_labels(const PlantedSpec& spec) {
  std::vector<int> labels(spec.experts);
  for (int i = 0; i < spec.experts; ++i) labels[i] = planted_group(spec, i);
  return labels;
}

MoeModel gen_planted_model(const PlantedSpec& spec) {
  MoeModel m;
  m.d_h = spec.d_h;
  m.d_m = spec.d_m;
  double scale = 1.0 / std::sqrt(static_cast<double>(spec.d_h));

  for (int l = 0; l < spec.layers; ++l) {
    std::vector<ExpertWeights> bases(spec.groups);
    for (int b = 0; b < spec.groups; ++b) {
      Rng rng(spec.seed, stream_id(kStreamBase, static_cast<std::uint64_t>(l),
                                   static_cast<std::uint64_t>(b)));
      ExpertWeights e;
      e.w_gate = Mat(spec.d_h, spec.d_m);
      e.w_up = Mat(spec.d_h, spec.d_m);
      e.w_down = Mat(spec.d_m, spec.d_h);
      fill_normal(e.w_gate, rng, scale);
      fill_normal(e.w_up, rng, scale);
      fill_normal(e.w_down, rng, scale);
      bases[b] = std::move(e);
    }

    MoeLayer layer;
    layer.k = spec.top_k;
    for (int i = 0; i < spec.experts; ++i) {
      const ExpertWeights& base = bases[planted_group(spec, i)];
      Rng rng(spec.seed, stream_id(kStreamNoise, static_cast<std::uint64_t>(l),
                                   static_cast<std::uint64_t>(i)));
      ExpertWeights e = base;
      // Multiplicative perturbation; sigma = 0 leaves the base bits intact.
      auto perturb = [&](Mat& w) {
        for (float& v : w.data)
          v = static_cast<float>(static_cast<double>(v) * (1.0 + spec.sigma * rng.next_normal()));
      };
      perturb(e.w_gate);
      perturb(e.w_up);
      perturb(e.w_down);
      layer.experts.push_back(std::move(e));
      layer.remap.push_back(i);
    }

    Rng rng(spec.seed, stream_id(kStreamRouter, static_cast<std::uint64_t>(l), 0));
    layer.router = Mat(spec.d_h, spec.experts);
    fill_normal(layer.router, rng, scale);
    m.layers.push_back(std::move(layer));
  }
  return m;
}

TokenBatch gen_batch(const PlantedSpec& spec, int tokens) {
  if (tokens < 1) fail(ErrorCode::Argument, "token count must be positive");
  TokenBatch b;
  b.x = Mat(tokens, spec.d_h);
  Rng rng(spec.seed, stream_id(kStreamBatch, 0, 0));
  for (float& v : b.x.data) v = static_cast<float>(rng.next_normal());
  return b;
}

}  // namespace moekit
