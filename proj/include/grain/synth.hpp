#pragma once

// Synthetic grounded scenes. Each image has a noisy background, a large
// distractor block of a random palette colour, and one small shape whose
// colour and form determine the class. Class identity is therefore only
// readable from the small region, which the record's single box encloses
// exactly.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "grain/box_geometry.hpp"
#include "grain/errors.hpp"
#include "grain/image.hpp"
#include "grain/random.hpp"
#include "grain/shard.hpp"

namespace grain {

struct PaletteColor {
  const char* name;
  std::uint8_t rgb[3];
};

inline constexpr std::array<PaletteColor, 8> kShapeColors{{{"red", {220, 30, 30}},
                                                           {"green", {30, 200, 60}},
                                                           {"blue", {40, 70, 230}},
                                                           {"yellow", {235, 220, 40}},
                                                           {"magenta", {215, 40, 200}},
                                                           {"cyan", {40, 215, 220}},
                                                           {"orange", {240, 140, 20}},
                                                           {"white", {245, 245, 245}}}};

inline constexpr std::array<PaletteColor, 4> kBackgrounds{
    {{"gray", {90, 90, 90}}, {"brown", {100, 70, 45}}, {"navy", {30, 35, 80}}, {"olive", {85, 90, 40}}}};

inline constexpr std::array<const char*, 4> kShapes{"square", "cross", "ring", "stripes"};

struct SynthClass {
  int color = 0;
  int shape = 0;
  std::string name;  // "<colour> <shape>"
  std::vector<std::string> descriptions;
};

inline SynthClass synth_class(int k) {
  if (k < 0 || k >= static_cast<int>(kShapeColors.size() * kShapes.size()))
    throw ConfigError("synthetic classes are limited to 32");
  SynthClass c;
  c.color = k % static_cast<int>(kShapeColors.size());
  c.shape = k / static_cast<int>(kShapeColors.size());
  const std::string color = kShapeColors[static_cast<std::size_t>(c.color)].name;
  const std::string shape = kShapes[static_cast<std::size_t>(c.shape)];
  c.name = color + " " + shape;
  c.descriptions = {"small " + color + " " + shape, color + " colored " + shape + " mark"};
  return c;
}

struct SceneSpec {
  int size = 64;
  int class_id = 0;
  int background = 0;
  int shape_x = 0, shape_y = 0, shape_size = 16;  // top-left corner and side, pixels
  int block_color = 0;
  int block_x0 = 0, block_y0 = 0, block_x1 = 0, block_y1 = 0;
  std::uint64_t noise_seed = 0;
};

struct RenderedScene {
  Image image;
  std::vector<std::uint8_t> shape_mask;  // 1 where the class shape was drawn
};

inline bool shape_covers(int shape, int dx, int dy, int s) {
  switch (shape) {
    case 0: return true;
    case 1: {
      const int lo = s / 3, hi = s - s / 3;
      return (dx >= lo && dx < hi) || (dy >= lo && dy < hi);
    }
    case 2: {
      const int t = std::max(2, s / 4);
      return dx < t || dy < t || dx >= s - t || dy >= s - t;
    }
    default: return (dy / std::max(1, s / 4)) % 2 == 0 || dy == s - 1;
  }
}

inline RenderedScene render_scene(const SceneSpec& spec) {
  const int s = spec.size;
  RenderedScene out{Image(s, s), std::vector<std::uint8_t>(static_cast<std::size_t>(s) * s, 0)};
  Rng noise(spec.noise_seed);
  const auto& bg = kBackgrounds[static_cast<std::size_t>(spec.background)].rgb;
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int c = 0; c < 3; ++c)
        out.image.at(x, y, c) = static_cast<std::uint8_t>(std::clamp<int>(bg[c] + static_cast<int>(noise.index(25)) - 12, 0, 255));
  const auto& block = kShapeColors[static_cast<std::size_t>(spec.block_color)].rgb;
  for (int y = spec.block_y0; y < spec.block_y1; ++y)
    for (int x = spec.block_x0; x < spec.block_x1; ++x)
      for (int c = 0; c < 3; ++c) out.image.at(x, y, c) = static_cast<std::uint8_t>(block[c] * 0.6);
  const auto cls = synth_class(spec.class_id);
  const auto& fg = kShapeColors[static_cast<std::size_t>(cls.color)].rgb;
  for (int dy = 0; dy < spec.shape_size; ++dy)
    for (int dx = 0; dx < spec.shape_size; ++dx) {
      if (!shape_covers(cls.shape, dx, dy, spec.shape_size)) continue;
      const int x = spec.shape_x + dx, y = spec.shape_y + dy;
      for (int c = 0; c < 3; ++c) out.image.at(x, y, c) = fg[c];
      out.shape_mask[static_cast<std::size_t>(y) * s + x] = 1;
    }
  return out;
}

inline NormBox shape_box(const SceneSpec& spec) {
  return rescale_to_normalized({static_cast<double>(spec.shape_x), static_cast<double>(spec.shape_y),
                                static_cast<double>(spec.shape_x + spec.shape_size),
                                static_cast<double>(spec.shape_y + spec.shape_size)},
                               spec.size, spec.size);
}

inline const char* location_word(const SceneSpec& spec) {
  static constexpr const char* kWords[3][3] = {{"top left", "top", "top right"},
                                              {"left", "center", "right"},
                                              {"bottom left", "bottom", "bottom right"}};
  const int cx = spec.shape_x + spec.shape_size / 2, cy = spec.shape_y + spec.shape_size / 2;
  return kWords[std::min(2, 3 * cy / spec.size)][std::min(2, 3 * cx / spec.size)];
}

inline SceneSpec sample_scene(int class_id, int size, double shape_fraction, Rng& rng) {
  SceneSpec spec;
  spec.size = size;
  spec.class_id = class_id;
  spec.background = static_cast<int>(rng.index(kBackgrounds.size()));
  spec.shape_size = std::max(4, static_cast<int>(shape_fraction * size + 0.5));
  spec.shape_x = static_cast<int>(rng.index(static_cast<std::size_t>(size - spec.shape_size + 1)));
  spec.shape_y = static_cast<int>(rng.index(static_cast<std::size_t>(size - spec.shape_size + 1)));
  spec.block_color = static_cast<int>(rng.index(kShapeColors.size()));
  const int bw = size * (4 + static_cast<int>(rng.index(3))) / 10;
  const int bh = size * (4 + static_cast<int>(rng.index(3))) / 10;
  spec.block_x0 = static_cast<int>(rng.index(static_cast<std::size_t>(size - bw + 1)));
  spec.block_y0 = static_cast<int>(rng.index(static_cast<std::size_t>(size - bh + 1)));
  spec.block_x1 = spec.block_x0 + bw;
  spec.block_y1 = spec.block_y0 + bh;
  spec.noise_seed = rng.next_u64();
  return spec;
}

inline AnnotationRecord scene_record(const std::string& image_id, const SceneSpec& spec) {
  const auto cls = synth_class(spec.class_id);
  const std::string bg = kBackgrounds[static_cast<std::size_t>(spec.background)].name;
  const std::string block = kShapeColors[static_cast<std::size_t>(spec.block_color)].name;
  AnnotationRecord r;
  r.image_id = image_id;
  r.original_caption = "a " + bg + " picture with a " + cls.name + " at the " + location_word(spec);
  r.mllm_caption = "a " + cls.name + " beside a large " + block + " block on a " + bg + " background";
  r.primary_subject = cls.name;
  r.descriptions = {cls.descriptions.front()};
  r.boxes = {{0, shape_box(spec), 1.0}};
  return r;
}

struct SynthOptions {
  int n_images = 32;
  int n_classes = 4;
  std::uint64_t seed = 0;
  int image_size = 64;
  double shape_fraction = 0.25;
  std::string id_prefix = "synth";
};

struct SynthResult {
  std::string shard_path;
  std::vector<AnnotationRecord> records;
  std::vector<SceneSpec> scenes;
  std::vector<int> labels;
};

// Writes <out>/images/*.ppm, <out>/shard.jsonl (+ sidecar), <out>/index.jsonl
// ({"image", "label", "captions"} per line) and <out>/descriptions.json.
inline SynthResult synth_grounded_dataset(const std::string& out_dir, const SynthOptions& opt) {
  if (opt.n_classes < 1 || opt.n_images < opt.n_classes)
    throw ConfigError("synth needs n_images >= n_classes >= 1");
  namespace fs = std::filesystem;
  const fs::path out(out_dir);
  fs::create_directories(out / "images");
  Rng rng(derive_seed(opt.seed, 0x73796e7468ULL));
  SynthResult result;
  nlohmann::ordered_json image_index = nlohmann::ordered_json::object();
  std::ofstream index(out / "index.jsonl", std::ios::trunc);
  for (int i = 0; i < opt.n_images; ++i) {
    const int k = i % opt.n_classes;
    const auto spec = sample_scene(k, opt.image_size, opt.shape_fraction, rng);
    char id[64];
    std::snprintf(id, sizeof(id), "%s-%05d", opt.id_prefix.c_str(), i);
    const std::string rel = std::string("images/") + id + ".ppm";
    write_ppm(render_scene(spec).image, (out / rel).string());
    auto record = scene_record(id, spec);
    nlohmann::ordered_json line;
    line["image"] = rel;
    line["label"] = synth_class(k).name;
    line["captions"] = {record.original_caption, record.mllm_caption};
    index << line.dump() << '\n';
    image_index[id] = rel;
    result.records.push_back(std::move(record));
    result.scenes.push_back(spec);
    result.labels.push_back(k);
  }
  result.shard_path = (out / "shard.jsonl").string();
  write_shard(result.shard_path, result.records);

  nlohmann::ordered_json meta;
  meta["pipeline_version"] = "synth-1";
  meta["generator"] = {{"n_images", opt.n_images}, {"n_classes", opt.n_classes}, {"seed", opt.seed},
                       {"image_size", opt.image_size}, {"shape_fraction", opt.shape_fraction}};
  meta["record_count"] = result.records.size();
  meta["image_index"] = image_index;
  std::ofstream(sidecar_path(result.shard_path), std::ios::trunc) << meta.dump(2) << '\n';

  nlohmann::ordered_json descriptions = nlohmann::ordered_json::object();
  for (int k = 0; k < opt.n_classes; ++k) {
    const auto c = synth_class(k);
    descriptions[c.name] = c.descriptions;
  }
  std::ofstream(out / "descriptions.json", std::ios::trunc) << descriptions.dump(2) << '\n';
  return result;
}

}  // namespace grain
