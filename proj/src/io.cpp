#include "moekit/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace moekit {

namespace {

constexpr char kModelMagic[4] = {'S', 'M', 'C', 'K'};
constexpr char kBatchMagic[4] = {'F', '3', '2', 'M'};
constexpr std::uint16_t kModelVersion = 1;

// All integers and floats are serialized little-endian byte by byte, so the
// files read back identically on any host.
void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

void put_mat(std::string& out, const Mat& m) {
  for (float f : m.data) put_f32(out, f);
}

class Reader {
 public:
  Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

  std::uint16_t u16() {
    need(2, "header");
    std::uint16_t v = static_cast<std::uint8_t>(buf_[pos_]) |
                      (static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf_[pos_ + 1])) << 8);
    pos_ += 2;
    return v;
  }

  std::uint32_t u32() {
    need(4, "header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  void read_mat(Mat& m) {
    for (float& f : m.data) f = f32();
  }

  size_t remaining() const { return buf_.size() - pos_; }

  void need(size_t bytes, const char* what) {
    if (buf_.size() - pos_ < bytes)
      fail(ErrorCode::IoTruncated, path_ + ": truncated while reading " + std::string(what));
  }

 private:
  const std::string& buf_;
  std::string path_;
  size_t pos_ = 0;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return buf;
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open " + path + " for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) fail(ErrorCode::Io, "write failed for " + path);
}

}  // namespace

void save_checkpoint(const MoeModel& m, const std::string& path) {
  validate_model(m, false);
  std::string out;
  out.append(kModelMagic, 4);
  put_u16(out, kModelVersion);
  put_u32(out, static_cast<std::uint32_t>(m.layers.size()));
  put_u32(out, static_cast<std::uint32_t>(m.d_h));
  put_u32(out, static_cast<std::uint32_t>(m.d_m));
  for (const MoeLayer& layer : m.layers) {
    put_u32(out, static_cast<std::uint32_t>(layer.slots()));
    put_u32(out, static_cast<std::uint32_t>(layer.stored()));
    put_u32(out, static_cast<std::uint32_t>(layer.k));
    for (std::int32_t s : layer.remap) put_u32(out, static_cast<std::uint32_t>(s));
  }
  for (const MoeLayer& layer : m.layers) {
    put_mat(out, layer.router);
    for (const ExpertWeights& e : layer.experts) {
      put_mat(out, e.w_gate);
      put_mat(out, e.w_up);
      put_mat(out, e.w_down);
    }
  }
  write_file(path, out);
}

MoeModel load_checkpoint(const std::string& path) {
  std::string buf = read_file(path);
  if (buf.size() < 4 || std::memcmp(buf.data(), kModelMagic, 4) != 0)
    fail(ErrorCode::IoBadMagic, path + ": not a model checkpoint (bad magic)");
  Reader r(buf, path);
  r.u32();  // skip magic (validated above)
  std::uint16_t version = r.u16();
  if (version != kModelVersion)
    fail(ErrorCode::IoVersion,
         path + ": unsupported checkpoint version " + std::to_string(version));

  std::uint32_t layers = r.u32();
  std::uint32_t d_h = r.u32();
  std::uint32_t d_m = r.u32();
  constexpr std::uint32_t kDimLimit = 1u << 24;
  if (d_h == 0 || d_m == 0 || d_h > kDimLimit || d_m > kDimLimit || layers > kDimLimit)
    fail(ErrorCode::IoSize, path + ": implausible header dimensions");

  struct LayerHeader {
    std::uint32_t n, stored, k;
    std::vector<std::uint32_t> remap;
  };
  std::vector<LayerHeader> headers;
  // Size arithmetic over the whole header first: layer payloads are checked
  // against the actual file size before any tensor is allocated.
  std::uint64_t payload_floats = 0;
  for (std::uint32_t l = 0; l < layers; ++l) {
    LayerHeader h;
    h.n = r.u32();
    h.stored = r.u32();
    h.k = r.u32();
    if (h.n == 0 || h.n > kDimLimit || h.stored == 0 || h.stored > h.n || h.k == 0 || h.k > h.n)
      fail(ErrorCode::IoSize, path + ": inconsistent layer header");
    h.remap.resize(h.n);
    for (std::uint32_t i = 0; i < h.n; ++i) {
      h.remap[i] = r.u32();
      if (h.remap[i] >= h.stored) fail(ErrorCode::IoSize, path + ": remap entry out of range");
    }
    payload_floats += static_cast<std::uint64_t>(d_h) * h.n;
    payload_floats +=
        static_cast<std::uint64_t>(h.stored) * 3ULL * static_cast<std::uint64_t>(d_h) * d_m;
    headers.push_back(std::move(h));
  }
  std::uint64_t expected_bytes = payload_floats * 4ULL;
  if (expected_bytes / 4ULL != payload_floats || expected_bytes > (1ULL << 62))
    fail(ErrorCode::IoSize, path + ": payload size overflows");
  if (r.remaining() < expected_bytes)
    fail(ErrorCode::IoTruncated, path + ": header promises " + std::to_string(expected_bytes) +
                                     " payload bytes, file holds " + std::to_string(r.remaining()));
  if (r.remaining() > expected_bytes)
    fail(ErrorCode::IoSize, path + ": trailing bytes past the promised payload");

  MoeModel m;
  m.d_h = static_cast<int>(d_h);
  m.d_m = static_cast<int>(d_m);
  for (const LayerHeader& h : headers) {
    MoeLayer layer;
    layer.k = static_cast<int>(h.k);
    layer.remap.assign(h.remap.begin(), h.remap.end());
    layer.router = Mat(m.d_h, static_cast<int>(h.n));
    r.read_mat(layer.router);
    for (std::uint32_t e = 0; e < h.stored; ++e) {
      ExpertWeights w;
      w.w_gate = Mat(m.d_h, m.d_m);
      w.w_up = Mat(m.d_h, m.d_m);
      w.w_down = Mat(m.d_m, m.d_h);
      r.read_mat(w.w_gate);
      r.read_mat(w.w_up);
      r.read_mat(w.w_down);
      layer.experts.push_back(std::move(w));
    }
    m.layers.push_back(std::move(layer));
  }
  validate_model(m, false);
  return m;
}

void save_batch(const TokenBatch& b, const std::string& path) {
  std::string out;
  out.append(kBatchMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(b.x.rows));
  put_u32(out, static_cast<std::uint32_t>(b.x.cols));
  put_mat(out, b.x);
  write_file(path, out);
}

TokenBatch load_batch(const std::string& path) {
  std::string buf = read_file(path);
  if (buf.size() < 4 || std::memcmp(buf.data(), kBatchMagic, 4) != 0)
    fail(ErrorCode::IoBadMagic, path + ": not a token batch (bad magic)");
  Reader r(buf, path);
  r.u32();  // magic
  std::uint32_t tokens = r.u32();
  std::uint32_t d_h = r.u32();
  constexpr std::uint32_t kDimLimit = 1u << 28;
  if (tokens == 0 || d_h == 0 || tokens > kDimLimit || d_h > kDimLimit)
    fail(ErrorCode::IoSize, path + ": implausible batch header");
  std::uint64_t expected = static_cast<std::uint64_t>(tokens) * d_h * 4ULL;
  if (r.remaining() < expected)
    fail(ErrorCode::IoTruncated, path + ": header promises " + std::to_string(expected) +
                                     " payload bytes, file holds " + std::to_string(r.remaining()));
  if (r.remaining() > expected)
    fail(ErrorCode::IoSize, path + ": trailing bytes past the promised payload");
  TokenBatch b;
  b.x = Mat(static_cast<int>(tokens), static_cast<int>(d_h));
  r.read_mat(b.x);
  return b;
}

void save_stats(const CalibrationStats& stats, const std::string& path) {
  nlohmann::json doc;
  doc["schema_version"] = 1;
  doc["kind"] = "calibration_stats";
  doc["tokens"] = stats.tokens;
  doc["d_h"] = stats.d_h;
  doc["d_m"] = stats.d_m;
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerStats& ls : stats.layers) {
    nlohmann::json jl;
    jl["n"] = ls.n;
    jl["frequency"] = ls.frequency;
    jl["router_score"] = ls.router_score;
    jl["mean_logits"] = ls.mean_logits;
    nlohmann::json mo = nlohmann::json::array();
    for (int i = 0; i < ls.mean_output.rows; ++i)
      mo.push_back(std::vector<float>(ls.mean_output.row(i), ls.mean_output.row(i) + ls.mean_output.cols));
    jl["mean_output"] = std::move(mo);
    nlohmann::json msl = nlohmann::json::array();
    for (int i = 0; i < ls.mean_selected_logits.rows; ++i)
      msl.push_back(std::vector<float>(ls.mean_selected_logits.row(i),
                                       ls.mean_selected_logits.row(i) + ls.mean_selected_logits.cols));
    jl["mean_selected_logits"] = std::move(msl);
    layers.push_back(std::move(jl));
  }
  doc["layers"] = std::move(layers);
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open " + path + " for writing");
  out << doc.dump(2) << "\n";
  if (!out) fail(ErrorCode::Io, "write failed for " + path);
}

CalibrationStats load_stats(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Io, path + ": invalid JSON: " + e.what());
  }
  try {
    if (doc.at("kind") != "calibration_stats")
      fail(ErrorCode::Io, path + ": not a calibration stats document");
    if (doc.at("schema_version") != 1)
      fail(ErrorCode::IoVersion, path + ": unsupported stats schema version");
    CalibrationStats stats;
    stats.tokens = doc.at("tokens");
    stats.d_h = doc.at("d_h");
    stats.d_m = doc.at("d_m");
    for (const nlohmann::json& jl : doc.at("layers")) {
      LayerStats ls;
      ls.n = jl.at("n");
      ls.frequency = jl.at("frequency").get<std::vector<std::uint64_t>>();
      ls.router_score = jl.at("router_score").get<std::vector<double>>();
      ls.mean_logits = jl.at("mean_logits").get<std::vector<double>>();
      const nlohmann::json& mo = jl.at("mean_output");
      ls.mean_output = Mat(ls.n, stats.d_h);
      for (int i = 0; i < ls.n; ++i) {
        std::vector<float> row = mo.at(i).get<std::vector<float>>();
        if (static_cast<int>(row.size()) != stats.d_h)
          fail(ErrorCode::Io, path + ": mean_output row width mismatch");
        std::copy(row.begin(), row.end(), ls.mean_output.row(i));
      }
      const nlohmann::json& msl = jl.at("mean_selected_logits");
      ls.mean_selected_logits = Mat(ls.n, ls.n);
      for (int i = 0; i < ls.n; ++i) {
        std::vector<float> row = msl.at(i).get<std::vector<float>>();
        if (static_cast<int>(row.size()) != ls.n)
          fail(ErrorCode::Io, path + ": mean_selected_logits row width mismatch");
        std::copy(row.begin(), row.end(), ls.mean_selected_logits.row(i));
      }
      if (static_cast<int>(ls.frequency.size()) != ls.n ||
          static_cast<int>(ls.router_score.size()) != ls.n ||
          static_cast<int>(ls.mean_logits.size()) != ls.n)
        fail(ErrorCode::Io, path + ": stats vector lengths mismatch");
      stats.layers.push_back(std::move(ls));
    }
    return stats;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Io, path + ": malformed stats document: " + e.what());
  }
}

}  // namespace moekit
