#pragma once

// Annotation shards: UTF-8 JSON Lines, one AnnotationRecord per line, with a
// "<shard>.meta.json" sidecar describing how the shard was produced.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "grain/box_geometry.hpp"
#include "grain/errors.hpp"

namespace grain {

struct LocalizedBox {
  int description_index = 0;
  NormBox box;
  double confidence = 0.0;
};

struct AnnotationRecord {
  std::string image_id;
  std::string original_caption;
  std::string mllm_caption;
  std::string primary_subject;
  std::vector<std::string> descriptions;
  std::vector<LocalizedBox> boxes;
};

inline nlohmann::ordered_json to_json_line(const AnnotationRecord& r) {
  nlohmann::ordered_json j;
  j["image_id"] = r.image_id;
  j["original_caption"] = r.original_caption;
  j["mllm_caption"] = r.mllm_caption;
  j["primary_subject"] = r.primary_subject;
  j["descriptions"] = r.descriptions;
  auto boxes = nlohmann::ordered_json::array();
  for (const auto& b : r.boxes)
    boxes.push_back({b.description_index, b.box.cx, b.box.cy, b.box.w, b.box.h, b.confidence});
  j["boxes"] = std::move(boxes);
  return j;
}

// Structural parse of one shard line; `line_no` is 1-based.
inline AnnotationRecord parse_record(const std::string& line, std::size_t line_no) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(line_no, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError(line_no, "record is not a JSON object");
  auto text_field = [&](const char* key) -> std::string {
    if (!j.contains(key) || !j[key].is_string()) throw SchemaError(line_no, std::string("missing string field '") + key + "'");
    return j[key].get<std::string>();
  };
  AnnotationRecord r;
  r.image_id = text_field("image_id");
  r.original_caption = text_field("original_caption");
  r.mllm_caption = text_field("mllm_caption");
  r.primary_subject = text_field("primary_subject");
  if (!j.contains("descriptions") || !j["descriptions"].is_array())
    throw SchemaError(line_no, "missing array field 'descriptions'");
  for (const auto& d : j["descriptions"]) {
    if (!d.is_string()) throw SchemaError(line_no, "descriptions must be strings");
    r.descriptions.push_back(d.get<std::string>());
  }
  if (!j.contains("boxes") || !j["boxes"].is_array()) throw SchemaError(line_no, "missing array field 'boxes'");
  for (const auto& b : j["boxes"]) {
    if (!b.is_array() || b.size() != 6) throw SchemaError(line_no, "box entries must be [index, cx, cy, w, h, confidence]");
    for (const auto& v : b)
      if (!v.is_number()) throw SchemaError(line_no, "box entries must be numeric");
    if (!b[0].is_number_integer()) throw SchemaError(line_no, "box description index must be an integer");
    r.boxes.push_back({b[0].get<int>(), {b[1].get<double>(), b[2].get<double>(), b[3].get<double>(), b[4].get<double>()},
                       b[5].get<double>()});
  }
  return r;
}

// Semantic invariants; returns human-readable violations (empty when valid).
inline std::vector<std::string> validate_record(const AnnotationRecord& r, double conf_threshold = 0.0) {
  std::vector<std::string> problems;
  if (r.image_id.empty()) problems.push_back("empty image_id");
  std::set<int> seen;
  for (const auto& b : r.boxes) {
    const std::string where = r.image_id + " box for description " + std::to_string(b.description_index);
    if (b.description_index < 0 || b.description_index >= static_cast<int>(r.descriptions.size()))
      problems.push_back(where + ": description index out of range");
    if (!seen.insert(b.description_index).second) problems.push_back(where + ": duplicate description index");
    if (!(b.confidence >= 0.0 && b.confidence <= 1.0)) problems.push_back(where + ": confidence outside [0,1]");
    if (b.confidence < conf_threshold) problems.push_back(where + ": confidence below threshold");
    if (!is_valid(b.box)) problems.push_back(where + ": invalid box");
  }
  for (const auto& d : r.descriptions)
    if (d.empty()) problems.push_back(r.image_id + ": empty description");
  return problems;
}

inline std::string sidecar_path(const std::string& shard_path) { return shard_path + ".meta.json"; }

inline void write_shard(const std::string& path, const std::vector<AnnotationRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write shard " + path);
  for (const auto& r : records) out << to_json_line(r).dump() << '\n';
}

inline std::vector<AnnotationRecord> read_shard(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open shard " + path);
  std::vector<AnnotationRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    records.push_back(parse_record(line, line_no));
  }
  return records;
}

inline nlohmann::json read_sidecar(const std::string& shard_path) {
  std::ifstream in(sidecar_path(shard_path));
  if (!in) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed sidecar for " + shard_path + ": " + e.what());
  }
}

// Where the image for `image_id` lives: the sidecar's image_index (paths
// relative to the shard directory) or else "<image_root>/<image_id>.ppm".
inline std::string resolve_image_path(const std::string& shard_path, const nlohmann::json& sidecar,
                                      const std::string& image_id) {
  const auto dir = std::filesystem::path(shard_path).parent_path();
  if (sidecar.contains("image_index") && sidecar["image_index"].contains(image_id))
    return (dir / sidecar["image_index"][image_id].get<std::string>()).string();
  const std::string root = sidecar.value("image_root", std::string("images"));
  return (dir / root / (image_id + ".ppm")).string();
}

struct ShardSummary {
  std::size_t records = 0;
  std::size_t descriptions = 0;
  std::size_t boxes = 0;
  std::size_t records_without_boxes = 0;
  std::map<std::size_t, std::size_t> boxes_per_image;  // box count -> records
  std::size_t description_words_min = 0;
  std::size_t description_words_max = 0;
  double description_words_mean = 0.0;
  std::vector<std::string> failures;

  nlohmann::json to_json() const {
    nlohmann::json hist = nlohmann::json::object();
    for (const auto& [k, v] : boxes_per_image) hist[std::to_string(k)] = v;
    return {{"records", records},
            {"descriptions", descriptions},
            {"boxes", boxes},
            {"records_without_boxes", records_without_boxes},
            {"boxes_per_image", hist},
            {"description_words", {{"min", description_words_min}, {"max", description_words_max}, {"mean", description_words_mean}}},
            {"validation_failures", failures}};
  }
};

inline std::size_t word_count(const std::string& s) {
  std::istringstream in(s);
  std::size_t n = 0;
  std::string w;
  while (in >> w) ++n;
  return n;
}

inline ShardSummary inspect_shard(const std::string& path) {
  const auto records = read_shard(path);
  ShardSummary s;
  s.records = records.size();
  std::size_t word_total = 0;
  bool first = true;
  std::set<std::string> ids;
  for (const auto& r : records) {
    s.descriptions += r.descriptions.size();
    s.boxes += r.boxes.size();
    if (r.boxes.empty()) ++s.records_without_boxes;
    ++s.boxes_per_image[r.boxes.size()];
    for (const auto& d : r.descriptions) {
      const auto n = word_count(d);
      word_total += n;
      s.description_words_min = first ? n : std::min(s.description_words_min, n);
      s.description_words_max = first ? n : std::max(s.description_words_max, n);
      first = false;
    }
    if (!ids.insert(r.image_id).second) s.failures.push_back(r.image_id + ": duplicate image_id");
    for (auto& p : validate_record(r)) s.failures.push_back(std::move(p));
  }
  if (s.descriptions > 0) s.description_words_mean = static_cast<double>(word_total) / static_cast<double>(s.descriptions);
  return s;
}

}  // namespace grain
