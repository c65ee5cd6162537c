// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats: annotation text, detection JSON, and the RSRC1 tensor
// archive used for both model weights and feature pyramids.
//
// Annotation line:  scene_id img_w img_h cx cy w h theta_deg label [split]
// Archive layout:   "RSRC1\n" | u64 LE header length | JSON header | f32 LE payload
#pragma once

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rsparse/detection.hpp"
#include "rsparse/pooling.hpp"
#include "rsparse/scene.hpp"

namespace rsparse {

inline double deg_to_rad(double d) { return d * kPi / 180.0; }
inline double rad_to_deg(double r) { return r * 180.0 / kPi; }

// ---------------------------------------------------------------- annotations

struct AnnotationRecord {
  std::string scene_id;
  int image_width = 0;
  int image_height = 0;
  OrientedBox box;  // radians, normalized
  std::string label;
  std::string split;  // "", "inshore" or "offshore"

  bool operator==(const AnnotationRecord&) const = default;
};

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

template <class N>
N parse_number(std::string_view tok, const char* field, std::size_t line) {
  N v{};
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw ParseError("malformed " + std::string(field) + " '" + std::string(tok) + "'", line);
  if constexpr (std::is_floating_point_v<N>)
    if (!std::isfinite(v)) throw ParseError("non-finite " + std::string(field), line);
  return v;
}

}  // namespace detail

inline std::vector<AnnotationRecord> parse_annotations(std::string_view text) {
  std::vector<AnnotationRecord> out;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const auto tok = detail::split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() != 9 && tok.size() != 10)
      throw ParseError("expected 9 or 10 fields, got " + std::to_string(tok.size()), line_no);
    AnnotationRecord r;
    r.scene_id = std::string(tok[0]);
    r.image_width = detail::parse_number<int>(tok[1], "image width", line_no);
    r.image_height = detail::parse_number<int>(tok[2], "image height", line_no);
    if (r.image_width <= 0 || r.image_height <= 0) throw ParseError("non-positive image size", line_no);
    OrientedBox b;
    b.cx = detail::parse_number<double>(tok[3], "cx", line_no);
    b.cy = detail::parse_number<double>(tok[4], "cy", line_no);
    b.w = detail::parse_number<double>(tok[5], "width", line_no);
    b.h = detail::parse_number<double>(tok[6], "height", line_no);
    b.theta = deg_to_rad(detail::parse_number<double>(tok[7], "angle", line_no));
    if (!(b.w > 0)) throw ParseError("non-positive width", line_no);
    if (!(b.h > 0)) throw ParseError("non-positive height", line_no);
    r.box = normalize_box(b);
    r.label = std::string(tok[8]);
    if (tok.size() == 10) {
      r.split = std::string(tok[9]);
      if (r.split != "inshore" && r.split != "offshore") throw ParseError("unknown split '" + r.split + "'", line_no);
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string write_annotations(const std::vector<AnnotationRecord>& records) {
  std::ostringstream os;
  os << "# scene_id img_w img_h cx cy w h theta_deg label [split]\n";
  char buf[512];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%s %d %d %.17g %.17g %.17g %.17g %.17g %s", r.scene_id.c_str(), r.image_width,
                  r.image_height, r.box.cx, r.box.cy, r.box.w, r.box.h, rad_to_deg(r.box.theta), r.label.c_str());
    os << buf;
    if (!r.split.empty()) os << ' ' << r.split;
    os << '\n';
  }
  return os.str();
}

/// Groups records by scene id in order of first appearance.
inline std::vector<GroundTruthScene> group_annotations(const std::vector<AnnotationRecord>& records) {
  std::vector<GroundTruthScene> scenes;
  std::map<std::string, std::size_t> index;
  for (const auto& r : records) {
    auto [it, fresh] = index.try_emplace(r.scene_id, scenes.size());
    if (fresh) scenes.push_back({r.scene_id, r.image_width, r.image_height, {}, r.split});
    auto& s = scenes[it->second];
    if (s.image_width != r.image_width || s.image_height != r.image_height)
      throw Error("scene " + r.scene_id + " has inconsistent image sizes");
    s.boxes.push_back(r.box);
  }
  return scenes;
}

inline std::vector<AnnotationRecord> scene_annotations(const GroundTruthScene& s, const std::string& label = "ship") {
  std::vector<AnnotationRecord> out;
  for (const auto& b : s.boxes) out.push_back({s.scene_id, s.image_width, s.image_height, b, label, s.split});
  return out;
}

// ----------------------------------------------------------------- detections

struct SceneDetections {
  std::string scene_id;
  std::string config_hash;
  Detections detections;
};

inline double round_significant(double x, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, x);
  return std::strtod(buf, nullptr);
}

inline std::string write_detections(const std::vector<SceneDetections>& scenes) {
  nlohmann::json doc = nlohmann::json::array();
  for (const auto& s : scenes) {
    nlohmann::json dets = nlohmann::json::array();
    for (const auto& d : s.detections)
      dets.push_back({{"cx", round_significant(d.box.cx)},
                      {"cy", round_significant(d.box.cy)},
                      {"w", round_significant(d.box.w)},
                      {"h", round_significant(d.box.h)},
                      {"theta_deg", round_significant(rad_to_deg(d.box.theta))},
                      {"score", round_significant(d.score)},
                      {"keep", d.keep}});
    doc.push_back({{"scene_id", s.scene_id}, {"config_hash", s.config_hash}, {"detections", std::move(dets)}});
  }
  return doc.dump(1);
}

inline std::vector<SceneDetections> parse_detections(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(std::string("detections: ") + e.what());
  }
  if (!doc.is_array()) throw Error("detections: top level must be an array");
  std::vector<SceneDetections> out;
  auto num = [](const nlohmann::json& o, const char* key) {
    if (!o.contains(key) || !o[key].is_number()) throw Error(std::string("detections: missing number '") + key + "'");
    return o[key].get<double>();
  };
  for (const auto& s : doc) {
    if (!s.is_object() || !s.contains("scene_id") || !s["scene_id"].is_string() || !s.contains("detections") ||
        !s["detections"].is_array())
      throw Error("detections: scene entries need scene_id and detections");
    SceneDetections sd;
    sd.scene_id = s["scene_id"].get<std::string>();
    if (s.contains("config_hash")) sd.config_hash = s["config_hash"].get<std::string>();
    for (const auto& d : s["detections"]) {
      Detection det;
      det.box = {num(d, "cx"), num(d, "cy"), num(d, "w"), num(d, "h"), deg_to_rad(num(d, "theta_deg"))};
      validate_box(det.box);
      det.score = num(d, "score");
      if (!(det.score >= 0 && det.score <= 1)) throw Error("detections: score outside [0, 1]");
      det.keep = d.contains("keep") ? d["keep"].get<bool>() : true;
      sd.detections.push_back(det);
    }
    out.push_back(std::move(sd));
  }
  return out;
}

// ------------------------------------------------------------------- archives

class ArchiveError : public Error {
 public:
  enum class Kind { kUnrecognized, kPayloadMismatch, kTruncated, kIo };
  ArchiveError(Kind kind, const std::string& detail) : Error(label(kind) + ": " + detail), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  static std::string label(Kind k) {
    switch (k) {
      case Kind::kUnrecognized:
        return "unrecognized archive";
      case Kind::kPayloadMismatch:
        return "payload mismatch";
      case Kind::kTruncated:
        return "truncated archive";
      case Kind::kIo:
        break;
    }
    return "archive i/o error";
  }
  Kind kind_;
};

inline constexpr std::string_view kArchiveMagic = "RSRC1\n";

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Archive {
  nlohmann::json config;
  std::vector<NamedTensor> tensors;

  const Tensor<float>& at(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.value;
    throw ArchiveError(ArchiveError::Kind::kPayloadMismatch, "missing tensor " + name);
  }
};

namespace detail {

inline void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

}  // namespace detail

inline std::string serialize_archive(const Archive& a) {
  nlohmann::json manifest = nlohmann::json::array();
  std::string payload;
  for (const auto& t : a.tensors) {
    manifest.push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", payload.size()}, {"dtype", "f32"}});
    for (float f : t.value.values()) detail::put_u32_le(payload, std::bit_cast<std::uint32_t>(f));
  }
  const nlohmann::json header{{"format", "RSRC1"}, {"config", a.config}, {"tensors", manifest}};
  const std::string h = header.dump();
  std::string out(kArchiveMagic);
  const std::uint64_t len = h.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  out += h;
  out += payload;
  return out;
}

inline Archive deserialize_archive(std::string_view bytes) {
  using K = ArchiveError::Kind;
  if (bytes.size() < kArchiveMagic.size() || bytes.substr(0, kArchiveMagic.size()) != kArchiveMagic)
    throw ArchiveError(K::kUnrecognized, "bad magic");
  if (bytes.size() < kArchiveMagic.size() + 8) throw ArchiveError(K::kTruncated, "header length missing");
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t hlen = detail::get_u64_le(base + kArchiveMagic.size());
  const std::size_t hstart = kArchiveMagic.size() + 8;
  if (hlen > bytes.size() - hstart) throw ArchiveError(K::kTruncated, "header extends past end of file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(hstart, hlen));
  } catch (const nlohmann::json::parse_error&) {
    throw ArchiveError(K::kUnrecognized, "header is not valid JSON");
  }
  if (!header.is_object() || header.value("format", "") != "RSRC1" || !header.contains("tensors") ||
      !header["tensors"].is_array())
    throw ArchiveError(K::kUnrecognized, "header lacks format/tensors");
  const std::string_view payload = bytes.substr(hstart + hlen);
  Archive a;
  a.config = header.value("config", nlohmann::json::object());
  std::size_t expected = 0;
  for (const auto& e : header["tensors"]) {
    if (!e.contains("name") || !e.contains("shape") || !e.contains("offset") || e.value("dtype", "") != "f32")
      throw ArchiveError(K::kUnrecognized, "malformed manifest entry");
    const Shape shape = e["shape"].get<Shape>();
    const std::size_t offset = e["offset"].get<std::size_t>();
    const std::size_t n = shape_numel(shape);
    if (offset != expected) throw ArchiveError(K::kPayloadMismatch, "tensor " + e["name"].get<std::string>() + " offset");
    expected += 4 * n;
    if (expected > payload.size())
      throw ArchiveError(K::kPayloadMismatch, "manifest needs " + std::to_string(expected) + " bytes, payload has " +
                                                  std::to_string(payload.size()));
    std::vector<float> vals(n);
    const auto* p = reinterpret_cast<const unsigned char*>(payload.data()) + offset;
    for (std::size_t i = 0; i < n; ++i) vals[i] = std::bit_cast<float>(detail::get_u32_le(p + 4 * i));
    a.tensors.push_back({e["name"].get<std::string>(), Tensor<float>(shape, std::move(vals))});
  }
  if (expected != payload.size())
    throw ArchiveError(K::kPayloadMismatch, "manifest covers " + std::to_string(expected) + " of " +
                                                std::to_string(payload.size()) + " payload bytes");
  return a;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError(ArchiveError::Kind::kIo, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArchiveError(ArchiveError::Kind::kIo, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ArchiveError(ArchiveError::Kind::kIo, "write failed for " + path);
}

// --------------------------------------------------------------- model config

inline const char* to_string(ProposalInit v) {
  switch (v) {
    case ProposalInit::kRandom:
      return "random";
    case ProposalInit::kGrid:
      return "grid";
    case ProposalInit::kCenter:
      break;
  }
  return "center";
}
inline const char* to_string(FusionKind v) {
  switch (v) {
    case FusionKind::kAddition:
      return "add";
    case FusionKind::kMultiplication:
      return "mul";
    case FusionKind::kCrossAttention:
      break;
  }
  return "xattn";
}
inline const char* to_string(PoolingKind v) { return v == PoolingKind::kSeparate ? "separate" : "dcp"; }
inline const char* to_string(DecodeVariant v) { return v == DecodeVariant::kOrthogonal ? "orthogonal" : "published"; }

inline ProposalInit parse_init(const std::string& s) {
  if (s == "center") return ProposalInit::kCenter;
  if (s == "random") return ProposalInit::kRandom;
  if (s == "grid") return ProposalInit::kGrid;
  throw Error("unknown init strategy '" + s + "'");
}
inline FusionKind parse_fusion(const std::string& s) {
  if (s == "xattn") return FusionKind::kCrossAttention;
  if (s == "add") return FusionKind::kAddition;
  if (s == "mul") return FusionKind::kMultiplication;
  throw Error("unknown fusion '" + s + "'");
}
inline PoolingKind parse_pooling(const std::string& s) {
  if (s == "dcp") return PoolingKind::kDualContext;
  if (s == "separate") return PoolingKind::kSeparate;
  throw Error("unknown pooling '" + s + "'");
}
inline DecodeVariant parse_decode(const std::string& s) {
  if (s == "published") return DecodeVariant::kPublished;
  if (s == "orthogonal") return DecodeVariant::kOrthogonal;
  throw Error("unknown decode variant '" + s + "'");
}

/// Accepts a decimal ("1.857") or a ratio ("13/7").
inline double parse_ratio(const std::string& s) {
  const auto slash = s.find('/');
  if (slash == std::string::npos) return detail::parse_number<double>(s, "ratio", 1);
  const double num = detail::parse_number<double>(std::string_view(s).substr(0, slash), "ratio", 1);
  const double den = detail::parse_number<double>(std::string_view(s).substr(slash + 1), "ratio", 1);
  if (den == 0) throw Error("ratio with zero denominator");
  return num / den;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"proposals", c.num_proposals}, {"channels", c.channels},   {"hidden", c.hidden},
          {"heads", c.heads},             {"stages", c.stages},       {"num_classes", c.num_classes},
          {"sampling_ratio", c.sampling_ratio}, {"alpha", c.alpha},   {"dropout", c.dropout},
          {"init", to_string(c.init)},    {"fusion", to_string(c.fusion)},
          {"pooling", to_string(c.pooling)}, {"decode", to_string(c.decode)},
          {"fusion_keys_from_values", c.fusion_keys_from_values},
          {"image_width", c.image_width}, {"image_height", c.image_height}, {"seed", c.seed}};
}

/// Overlays the keys present in `j` onto `base`; unknown keys are rejected.
inline ModelConfig config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  for (const auto& [key, v] : j.items()) {
    if (key == "proposals") c.num_proposals = v.get<std::size_t>();
    else if (key == "channels") c.channels = v.get<std::size_t>();
    else if (key == "hidden") c.hidden = v.get<std::size_t>();
    else if (key == "heads") c.heads = v.get<std::size_t>();
    else if (key == "stages") c.stages = v.get<std::size_t>();
    else if (key == "num_classes") c.num_classes = v.get<std::size_t>();
    else if (key == "sampling_ratio") c.sampling_ratio = v.get<std::size_t>();
    else if (key == "alpha") c.alpha = v.is_string() ? parse_ratio(v.get<std::string>()) : v.get<double>();
    else if (key == "dropout") c.dropout = v.get<double>();
    else if (key == "init") c.init = parse_init(v.get<std::string>());
    else if (key == "fusion") c.fusion = parse_fusion(v.get<std::string>());
    else if (key == "pooling") c.pooling = parse_pooling(v.get<std::string>());
    else if (key == "decode") c.decode = parse_decode(v.get<std::string>());
    else if (key == "fusion_keys_from_values") c.fusion_keys_from_values = v.get<bool>();
    else if (key == "image_width") c.image_width = v.get<int>();
    else if (key == "image_height") c.image_height = v.get<int>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else throw Error("unknown model config key '" + key + "'");
  }
  return c;
}

/// FNV-1a over the canonical config JSON, as 16 hex digits.
inline std::string config_hash(const ModelConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config_to_json(c).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// -------------------------------------------------------------------- weights

template <class T>
std::string serialize_weights(const Model<T>& m) {
  Archive a;
  a.config = config_to_json(m.config);
  m.visit([&](const Parameter<T>& p) { a.tensors.push_back({p.name, p.value.template cast<float>()}); });
  return serialize_archive(a);
}

template <class T>
Model<T> deserialize_weights(std::string_view bytes) {
  const Archive a = deserialize_archive(bytes);
  Model<T> m = make_model<T>(config_from_json(a.config));
  std::size_t used = 0;
  m.visit([&](Parameter<T>& p) {
    const auto& t = a.at(p.name);
    if (t.shape() != p.value.shape())
      throw ArchiveError(ArchiveError::Kind::kPayloadMismatch,
                         p.name + " has shape " + shape_str(t.shape()) + ", model expects " + shape_str(p.value.shape()));
    p.value = t.template cast<T>();
    p.zero_grad();
    ++used;
  });
  if (used != a.tensors.size())
    throw ArchiveError(ArchiveError::Kind::kPayloadMismatch, "archive holds tensors the model does not use");
  return m;
}

template <class T>
void save_weights(const Model<T>& m, const std::string& path) {
  write_file(path, serialize_weights(m));
}

template <class T>
Model<T> load_weights(const std::string& path) {
  return deserialize_weights<T>(read_file(path));
}

// ------------------------------------------------------------------- pyramids

template <class T>
std::string serialize_pyramid(const FeaturePyramid<T>& pyr) {
  Archive a;
  nlohmann::json strides = nlohmann::json::object();
  for (const auto& l : pyr.levels) {
    const std::string name = "P" + std::to_string(l.level);
    strides[name] = l.stride();
    a.tensors.push_back({name, l.values.template cast<float>()});
  }
  a.config = {{"kind", "pyramid"}, {"image_width", pyr.image_width}, {"image_height", pyr.image_height},
              {"strides", strides}};
  return serialize_archive(a);
}

template <class T>
FeaturePyramid<T> deserialize_pyramid(std::string_view bytes) {
  const Archive a = deserialize_archive(bytes);
  if (a.config.value("kind", "") != "pyramid")
    throw ArchiveError(ArchiveError::Kind::kUnrecognized, "archive does not hold a pyramid");
  FeaturePyramid<T> pyr;
  pyr.image_width = a.config.at("image_width").get<int>();
  pyr.image_height = a.config.at("image_height").get<int>();
  for (const auto& t : a.tensors) {
    if (t.name.size() != 2 || t.name[0] != 'P') throw ArchiveError(ArchiveError::Kind::kPayloadMismatch, "bad level " + t.name);
    FeatureMap<T> m;
    m.level = t.name[1] - '0';
    const int stride = a.config.at("strides").at(t.name).get<int>();
    if (stride != m.stride()) throw ArchiveError(ArchiveError::Kind::kPayloadMismatch, "stride of " + t.name);
    m.values = t.value.template cast<T>();
    pyr.levels.push_back(std::move(m));
  }
  pyr.validate();
  return pyr;
}

template <class T>
void save_pyramid(const FeaturePyramid<T>& pyr, const std::string& path) {
  write_file(path, serialize_pyramid(pyr));
}

template <class T>
FeaturePyramid<T> load_pyramid(const std::string& path) {
  return deserialize_pyramid<T>(read_file(path));
}

}  // namespace rsparse
