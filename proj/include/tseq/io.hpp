// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats: binary feature blobs, JSONL annotations / predictions /
// manifests / metric reports, checkpoints and key-value config text.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tseq/codec.hpp"
#include "tseq/datapipe.hpp"
#include "tseq/error.hpp"
#include "tseq/metrics.hpp"
#include "tseq/model.hpp"

namespace tseq {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }
inline void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

class Reader {
 public:
  Reader(const std::string& bytes, std::string what) : b_(bytes), what_(std::move(what)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw IoError(what_ + ": truncated");
  }
  const std::string& b_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

/// Writes through a temporary file and renames, so readers never observe a
/// partial file.
inline void write_file(const fs::path& path, const std::string& bytes) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename onto " + path.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Feature blobs: "TSQF", u32 frames, u32 dim, frames * dim little-endian f32.

inline constexpr std::array<char, 4> kFeatureMagic{'T', 'S', 'Q', 'F'};

inline std::string encode_features(const Mat<float>& f) {
  std::string out(kFeatureMagic.begin(), kFeatureMagic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(f.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(f.cols()));
  for (Eigen::Index i = 0; i < f.size(); ++i) detail::put_f32(out, f.data()[i]);
  return out;
}

inline Mat<float> decode_features(const std::string& bytes, const std::string& what = "features") {
  detail::Reader r(bytes, what);
  if (r.bytes(4) != std::string(kFeatureMagic.begin(), kFeatureMagic.end()))
    throw IoError(what + ": bad magic");
  const auto rows = r.u32(), cols = r.u32();
  Mat<float> f(rows, cols);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = r.f32();
  if (!r.done()) throw IoError(what + ": trailing bytes");
  return f;
}

inline void write_features(const fs::path& path, const Mat<float>& f) { write_file(path, encode_features(f)); }
inline Mat<float> read_features(const fs::path& path) { return decode_features(read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// JSONL records

inline std::vector<json> read_jsonl(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline std::string to_jsonl(const std::vector<json>& records) {
  std::string out;
  for (const auto& r : records) out += r.dump() + "\n";
  return out;
}

inline json annotation_payload(const TaskAnnotation& a) {
  json p = json::object();
  switch (a.task) {
    case TaskId::TAD: {
      json arr = json::array();
      for (const auto& i : a.instances) arr.push_back({{"start", i.start}, {"end", i.end}, {"class", i.class_id}});
      p["instances"] = arr;
      break;
    }
    case TaskId::TAS: p["frame_labels"] = a.frame_labels; break;
    case TaskId::GEBD: p["boundaries"] = a.boundaries; break;
  }
  return p;
}

inline json annotation_record(const Video& v) {
  return {{"video_id", v.id},
          {"duration", v.duration},
          {"fps", v.fps},
          {"task", std::string(task_name(v.annotation.task))},
          {"payload", annotation_payload(v.annotation)}};
}

inline TaskAnnotation parse_annotation(const json& rec) {
  try {
    TaskAnnotation a;
    a.task = parse_task(rec.at("task").get<std::string>());
    const auto& p = rec.at("payload");
    switch (a.task) {
      case TaskId::TAD:
        for (const auto& i : p.at("instances"))
          a.instances.push_back({i.at("start").get<double>(), i.at("end").get<double>(), i.at("class").get<int>()});
        break;
      case TaskId::TAS: a.frame_labels = p.at("frame_labels").get<std::vector<int>>(); break;
      case TaskId::GEBD: a.boundaries = p.at("boundaries").get<std::vector<double>>(); break;
    }
    return a;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed annotation record: ") + e.what());
  }
}

/// Scores and times are written with round-trip precision.
inline json prediction_record(const std::string& video_id, double duration, const PredictionSet& p) {
  json payload = json::object();
  switch (p.task) {
    case TaskId::TAD: {
      json arr = json::array();
      for (const auto& i : p.tad)
        arr.push_back({{"start", i.start}, {"end", i.end}, {"class", i.class_id}, {"score", i.score}});
      payload["instances"] = arr;
      break;
    }
    case TaskId::TAS: {
      json arr = json::array();
      for (const auto& s : p.tas) arr.push_back({s.start_frame, s.end_frame, s.class_id});
      payload["segments"] = arr;
      break;
    }
    case TaskId::GEBD: {
      json arr = json::array();
      for (const auto& b : p.gebd) arr.push_back({{"timestamp", b.timestamp}, {"score", b.score}});
      payload["boundaries"] = arr;
      break;
    }
  }
  return {{"video_id", video_id},
          {"duration", duration},
          {"task", std::string(task_name(p.task))},
          {"payload", payload}};
}

inline PredictionSet parse_prediction(const json& rec) {
  try {
    PredictionSet p;
    p.task = parse_task(rec.at("task").get<std::string>());
    const auto& pl = rec.at("payload");
    switch (p.task) {
      case TaskId::TAD:
        for (const auto& i : pl.at("instances")) {
          if (!i.contains("score")) throw InvalidArgument("TAD prediction without score");
          p.tad.push_back({i.at("start").get<double>(), i.at("end").get<double>(), i.at("class").get<int>(),
                           i.at("score").get<double>()});
        }
        break;
      case TaskId::TAS:
        for (const auto& s : pl.at("segments")) p.tas.push_back({s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()});
        break;
      case TaskId::GEBD:
        for (const auto& b : pl.at("boundaries"))
          p.gebd.push_back({b.at("timestamp").get<double>(), b.value("score", 1.0)});
        break;
    }
    return p;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed prediction record: ") + e.what());
  }
}

inline json report_record(const MetricReport& r) {
  json rows = json::object();
  for (const auto& row : r.rows) rows[row.name] = row.value;
  return {{"task", std::string(task_name(r.task))}, {"metrics", rows}};
}

// ---------------------------------------------------------------------------
// Datasets on disk: <dir>/manifest.jsonl, <dir>/annotations.jsonl, <dir>/features/<id>.bin

struct Dataset {
  TaskId task = TaskId::TAD;
  int classes = 0;
  std::vector<Video> videos;
};

struct GeneratorInfo {
  std::uint64_t seed = 0;
  double noise_level = 0.0;
};

inline void save_dataset(const fs::path& dir, const Dataset& ds, const GeneratorInfo& gen,
                         const std::vector<std::vector<int>>& planted = {}) {
  std::vector<json> manifest, annotations;
  for (std::size_t i = 0; i < ds.videos.size(); ++i) {
    const auto& v = ds.videos[i];
    const std::string rel = "features/" + v.id + ".bin";
    write_features(dir / rel, v.features);
    json m = {{"video_id", v.id},
              {"features", rel},
              {"task", std::string(task_name(ds.task))},
              {"classes", ds.classes},
              {"generator", {{"seed", gen.seed}, {"noise_level", gen.noise_level}}}};
    if (i < planted.size()) m["generator"]["planted_classes"] = planted[i];
    manifest.push_back(m);
    annotations.push_back(annotation_record(v));
  }
  write_file(dir / "manifest.jsonl", to_jsonl(manifest));
  write_file(dir / "annotations.jsonl", to_jsonl(annotations));
}

/// Ground truth keyed by video id, in file order.
inline std::vector<Video> load_annotations(const fs::path& path) {
  std::vector<Video> out;
  for (const auto& rec : read_jsonl(path)) {
    Video v;
    try {
      v.id = rec.at("video_id").get<std::string>();
      v.duration = rec.at("duration").get<double>();
      v.fps = rec.at("fps").get<double>();
    } catch (const json::exception& e) {
      throw InputError(path.string() + ": " + e.what());
    }
    v.annotation = parse_annotation(rec);
    out.push_back(std::move(v));
  }
  return out;
}

inline Dataset load_dataset(const fs::path& dir) {
  const auto manifest = read_jsonl(dir / "manifest.jsonl");
  const auto annotations = load_annotations(dir / "annotations.jsonl");
  if (manifest.size() != annotations.size()) throw IoError(dir.string() + ": manifest and annotations differ in length");
  Dataset ds;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    const auto& m = manifest[i];
    Video v = annotations[i];
    try {
      if (m.at("video_id").get<std::string>() != v.id) throw IoError(dir.string() + ": manifest order mismatch at " + v.id);
      ds.task = parse_task(m.at("task").get<std::string>());
      ds.classes = m.at("classes").get<int>();
      v.features = read_features(dir / m.at("features").get<std::string>());
    } catch (const json::exception& e) {
      throw IoError(dir.string() + "/manifest.jsonl: " + e.what());
    }
    ds.videos.push_back(std::move(v));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints: "TSQC", u32 version, model config, layout counts, named blocks
// (u32 name length, name, u32 rows, u32 cols, f32 data), u64 FNV-1a of all
// preceding bytes.

inline constexpr std::array<char, 4> kCheckpointMagic{'T', 'S', 'Q', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  int time_tokens = 0;
  int tad_classes = 0;
  int tas_classes = 0;
  ParamStore<float> params;

  VocabLayout layout() const { return build_layout(time_tokens, tad_classes, tas_classes); }
};

inline std::string encode_checkpoint(const Checkpoint& c) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  const auto& m = c.model;
  for (int v : {m.input_dim, m.model_dim, m.encoder_layers, m.decoder_layers, m.attention_heads,
                m.feedforward_dim, m.frame_count, m.max_target_len, m.vocab_size})
    detail::put_u32(out, static_cast<std::uint32_t>(v));
  detail::put_f64(out, m.dropout_rate);
  for (int v : {c.time_tokens, c.tad_classes, c.tas_classes}) detail::put_u32(out, static_cast<std::uint32_t>(v));
  detail::put_u32(out, static_cast<std::uint32_t>(c.params.size()));
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    const auto& name = c.params.name(i);
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(c.params[i].rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(c.params[i].cols()));
    for (Eigen::Index k = 0; k < c.params[i].size(); ++k) detail::put_f32(out, c.params[i].data()[k]);
  }
  detail::put_u64(out, detail::fnv1a(out.data(), out.size()));
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < 16) throw IoError(what + ": truncated");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[body + i])) << (8 * i);
  if (stored != detail::fnv1a(bytes.data(), body)) throw IoError(what + ": checksum mismatch");
  const std::string content = bytes.substr(0, body);
  detail::Reader r(content, what);
  if (r.bytes(4) != std::string(kCheckpointMagic.begin(), kCheckpointMagic.end())) throw IoError(what + ": bad magic");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw IoError(what + ": unsupported version " + std::to_string(v));
  Checkpoint c;
  auto& m = c.model;
  for (int* f : {&m.input_dim, &m.model_dim, &m.encoder_layers, &m.decoder_layers, &m.attention_heads,
                 &m.feedforward_dim, &m.frame_count, &m.max_target_len, &m.vocab_size})
    *f = static_cast<int>(r.u32());
  m.dropout_rate = r.f64();
  c.time_tokens = static_cast<int>(r.u32());
  c.tad_classes = static_cast<int>(r.u32());
  c.tas_classes = static_cast<int>(r.u32());
  const auto blocks = r.u32();
  for (std::uint32_t b = 0; b < blocks; ++b) {
    const std::string name = r.bytes(r.u32());
    const auto rows = r.u32(), cols = r.u32();
    const auto idx = c.params.add(name, rows, cols);
    for (Eigen::Index k = 0; k < c.params[idx].size(); ++k) c.params[idx].data()[k] = r.f32();
  }
  if (!r.done()) throw IoError(what + ": trailing bytes");
  return c;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& c) { write_file(path, encode_checkpoint(c)); }
inline Checkpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path), path.string()); }

/// Copies checkpoint tensors into a model, requiring identical names and shapes.
inline void load_parameters(Seq2SeqModel<float>& model, const ParamStore<float>& src) {
  auto& dst = model.params();
  if (dst.size() != src.size()) throw IoError("checkpoint parameter count differs from model");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst.name(i) != src.name(i) || dst[i].rows() != src[i].rows() || dst[i].cols() != src[i].cols())
      throw IoError("checkpoint block " + src.name(i) + " does not match the model layout");
    dst[i] = src[i];
  }
}

// ---------------------------------------------------------------------------
// Key-value config text: "key = value" lines, '#' starts a comment.

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline KeyValues parse_key_values(const std::string& text, const std::string& origin = "config") {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(n) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(n) + ": empty key");
    if (kv.count(key)) throw ConfigError(origin + ":" + std::to_string(n) + ": duplicate key " + key);
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

}  // namespace tseq
