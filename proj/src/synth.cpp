/* Copyright 2026 The ConceptSeg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include "conceptseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "conceptseg/png_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace cseg {

ShapeFamily shape_family_from_string(const std::string& s) {
  if (s == "circle") return ShapeFamily::Circle;
  if (s == "rectangle") return ShapeFamily::Rectangle;
  if (s == "triangle") return ShapeFamily::Triangle;
  if (s == "striped-background") return ShapeFamily::StripedBackground;
  if (s == "gradient-background") return ShapeFamily::GradientBackground;
  throw ConfigError("unknown shape family: " + s);
}

std::string to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::Circle: return "circle";
    case ShapeFamily::Rectangle: return "rectangle";
    case ShapeFamily::Triangle: return "triangle";
    case ShapeFamily::StripedBackground: return "striped-background";
    case ShapeFamily::GradientBackground: return "gradient-background";
  }
  return "?";
}

void Vocabulary::validate() const {
  if (categories.empty()) throw ValidationError("vocabulary: empty");
  if (seen_mask.size() != categories.size())
    throw ValidationError("vocabulary: seen mask size mismatch");
  std::set<std::string> labels;
  bool any_thing = false, any_stuff = false, any_seen = false;
  for (std::size_t i = 0; i < categories.size(); ++i) {
    const Category& c = categories[i];
    if (c.id != static_cast<int>(i))
      throw ValidationError("vocabulary: ids must be contiguous from 0");
    if (c.label.empty()) throw ValidationError("vocabulary: blank label");
    if (!labels.insert(c.label).second)
      throw ValidationError("vocabulary: duplicate label '" + c.label + "'");
    (c.is_thing ? any_thing : any_stuff) = true;
    if (seen_mask[i]) any_seen = true;
  }
  if (!any_thing) throw ValidationError("vocabulary: needs a thing category");
  if (!any_stuff) throw ValidationError("vocabulary: needs a stuff category");
  if (!any_seen) throw ValidationError("vocabulary: seen subset is empty");
}

const Category& Vocabulary::category(int id) const {
  if (id < 0 || id >= size())
    throw ValidationError("unknown category id " + std::to_string(id));
  return categories[static_cast<std::size_t>(id)];
}

int Vocabulary::find_label(const std::string& label) const {
  for (const Category& c : categories)
    if (c.label == label) return c.id;
  return -1;
}

std::vector<int> Vocabulary::seen_ids() const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i)
    if (seen_mask[static_cast<std::size_t>(i)]) out.push_back(i);
  return out;
}

std::vector<int> Vocabulary::unseen_ids() const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i)
    if (!seen_mask[static_cast<std::size_t>(i)]) out.push_back(i);
  return out;
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < categories.size(); ++i) {
    h = fnv1a64_bytes(categories[i].label.data(), categories[i].label.size(), h);
    std::uint8_t flags = static_cast<std::uint8_t>(
        (categories[i].is_thing ? 1 : 0) | (seen_mask[i] ? 2 : 0));
    h = fnv1a64_bytes(&flags, 1, h);
  }
  return h;
}

void Image::validate() const {
  if (h < 8 || w < 8) throw ValidationError("image: dimensions must be >= 8");
  if (pixels.size() != static_cast<std::size_t>(h) * w * 3)
    throw ValidationError("image: pixel buffer size mismatch");
  for (double v : pixels)
    if (!(v >= 0.0 && v <= 1.0))
      throw ValidationError("image: pixel out of [0,1]");
}

void PanopticSegmentation::validate() const {
  if (id_map.size() != static_cast<std::size_t>(h) * w)
    throw ValidationError("panoptic: id map size mismatch");
  std::set<int> declared;
  for (const SegmentRecord& s : segments) {
    if (s.segment_id <= 0)
      throw ValidationError("panoptic: segment ids must be positive");
    if (!declared.insert(s.segment_id).second)
      throw ValidationError("panoptic: duplicate segment id " +
                            std::to_string(s.segment_id));
  }
  for (int v : id_map) {
    if (v == 0) continue;
    if (!declared.count(v))
      throw ValidationError("panoptic: id map references unknown segment " +
                            std::to_string(v));
  }
}

int PanopticSegmentation::category_of(int segment_id) const {
  for (const SegmentRecord& s : segments)
    if (s.segment_id == segment_id) return s.category_id;
  throw ValidationError("panoptic: unknown segment " +
                        std::to_string(segment_id));
}

std::vector<int> PanopticSegmentation::present_categories() const {
  std::set<int> cats;
  for (const SegmentRecord& s : segments) cats.insert(s.category_id);
  return {cats.begin(), cats.end()};
}

void SceneConfig::validate() const {
  if (h < 8 || w < 8)
    throw ConfigError("scene: dimensions must be at least 8x8");
  if (max_objects < 1) throw ConfigError("scene: max_objects must be >= 1");
  if (noise_std < 0) throw ConfigError("scene: noise_std must be >= 0");
  if (shape_palette.empty()) throw ConfigError("scene: empty shape palette");
}

std::map<int, ShapeFamily> default_palette(const Vocabulary& vocab) {
  std::map<int, ShapeFamily> palette;
  int thing_i = 0, stuff_i = 0;
  const ShapeFamily things[] = {ShapeFamily::Circle, ShapeFamily::Rectangle,
                                ShapeFamily::Triangle};
  const ShapeFamily stuffs[] = {ShapeFamily::GradientBackground,
                                ShapeFamily::StripedBackground};
  for (const Category& c : vocab.categories) {
    if (c.is_thing)
      palette[c.id] = things[thing_i++ % 3];
    else
      palette[c.id] = stuffs[stuff_i++ % 2];
  }
  return palette;
}

std::array<double, 3> category_color(int category_id) {
  // golden-angle hue spacing, converted from HSV (s=0.75, v by parity)
  double hue = std::fmod(static_cast<double>(category_id) * 0.61803398875, 1.0);
  double s = 0.75;
  double v = category_id % 2 == 0 ? 0.9 : 0.55;
  double hh = hue * 6.0;
  int sector = static_cast<int>(hh) % 6;
  double f = hh - std::floor(hh);
  double p = v * (1 - s);
  double q = v * (1 - s * f);
  double t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

namespace {

double quantize8(double v) {
  double clipped = std::clamp(v, 0.0, 1.0);
  return std::round(clipped * 255.0) / 255.0;
}

void paint_background(Image& img, ShapeFamily family,
                      const std::array<double, 3>& color, Rng& rng) {
  double phase = rng.uniform(0.0, 6.0);
  bool horizontal = rng.uniform() < 0.5;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double shade;
      if (family == ShapeFamily::StripedBackground) {
        int t = horizontal ? y : x;
        shade = (static_cast<int>(phase) + t / 3) % 2 == 0 ? 1.0 : 0.55;
      } else {
        double along = horizontal ? static_cast<double>(y) / (img.h - 1)
                                  : static_cast<double>(x) / (img.w - 1);
        shade = 0.45 + 0.55 * along;
      }
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = color[static_cast<std::size_t>(c)] * shade;
    }
}

struct ShapeSpec {
  ShapeFamily family;
  double cy, cx, size;  // size = radius / half extent
  double aspect;        // rectangles only
};

bool shape_contains(const ShapeSpec& s, double y, double x) {
  switch (s.family) {
    case ShapeFamily::Circle: {
      double dy = y - s.cy, dx = x - s.cx;
      return dy * dy + dx * dx <= s.size * s.size;
    }
    case ShapeFamily::Rectangle:
      return std::abs(y - s.cy) <= s.size * s.aspect &&
             std::abs(x - s.cx) <= s.size;
    case ShapeFamily::Triangle: {
      // upright isoceles triangle inscribed in the radius
      double dy = y - (s.cy - s.size);
      if (dy < 0 || dy > 2 * s.size) return false;
      double half_width = s.size * (dy / (2 * s.size));
      return std::abs(x - s.cx) <= half_width;
    }
    default:
      return false;
  }
}

}  // namespace

std::pair<Image, PanopticSegmentation> generate_scene(const SceneConfig& config,
                                                      const Vocabulary& vocab) {
  config.validate();
  vocab.validate();

  std::vector<int> stuff_ids, thing_ids;
  for (const auto& [cid, family] : config.shape_palette) {
    if (cid < 0 || cid >= vocab.size())
      throw ConfigError("scene: palette category " + std::to_string(cid) +
                        " not in vocabulary");
    if (!config.category_filter.empty() &&
        std::find(config.category_filter.begin(), config.category_filter.end(),
                  cid) == config.category_filter.end())
      continue;
    bool is_bg = family == ShapeFamily::StripedBackground ||
                 family == ShapeFamily::GradientBackground;
    (is_bg ? stuff_ids : thing_ids).push_back(cid);
  }
  if (stuff_ids.empty())
    throw ConfigError("scene: no stuff category available to paint");
  if (thing_ids.empty())
    throw ConfigError("scene: no thing category available to draw");

  Rng rng(config.seed);

  Image img;
  img.h = config.h;
  img.w = config.w;
  img.pixels.assign(static_cast<std::size_t>(config.h) * config.w * 3, 0.0);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%06llu",
                static_cast<unsigned long long>(config.seed));
  img.image_id = buf;

  PanopticSegmentation pan;
  pan.h = config.h;
  pan.w = config.w;
  pan.image_id = img.image_id;
  pan.id_map.assign(static_cast<std::size_t>(config.h) * config.w, 0);

  // background
  int bg_cat = stuff_ids[static_cast<std::size_t>(
      rng.uniform_int(static_cast<int>(stuff_ids.size())))];
  paint_background(img, config.shape_palette.at(bg_cat),
                   category_color(bg_cat), rng);
  std::fill(pan.id_map.begin(), pan.id_map.end(), 1);
  std::vector<SegmentRecord> drawn = {{1, bg_cat}};

  // objects, later draws occlude earlier ones
  int n_obj = 1 + rng.uniform_int(config.max_objects);
  double min_dim = static_cast<double>(std::min(config.h, config.w));
  for (int k = 0; k < n_obj; ++k) {
    int cat = thing_ids[static_cast<std::size_t>(
        rng.uniform_int(static_cast<int>(thing_ids.size())))];
    ShapeSpec spec;
    spec.family = config.shape_palette.at(cat);
    spec.size = rng.uniform(min_dim * 0.14, min_dim * 0.26);
    spec.cy = rng.uniform(spec.size, config.h - 1 - spec.size);
    spec.cx = rng.uniform(spec.size, config.w - 1 - spec.size);
    spec.aspect = rng.uniform(0.6, 1.4);
    int seg_id = k + 2;
    auto color = category_color(cat);
    double shade = rng.uniform(0.85, 1.0);
    for (int y = 0; y < config.h; ++y)
      for (int x = 0; x < config.w; ++x) {
        if (!shape_contains(spec, static_cast<double>(y),
                            static_cast<double>(x)))
          continue;
        pan.id_map[static_cast<std::size_t>(y) * config.w + x] = seg_id;
        for (int c = 0; c < 3; ++c)
          img.at(y, x, c) = color[static_cast<std::size_t>(c)] * shade;
      }
    drawn.push_back({seg_id, cat});
  }

  // drop records of fully occluded shapes
  std::set<int> visible(pan.id_map.begin(), pan.id_map.end());
  for (const SegmentRecord& s : drawn)
    if (visible.count(s.segment_id)) pan.segments.push_back(s);

  // additive gaussian noise, clipped, then 8-bit quantization so the PNG
  // round trip is lossless
  for (double& v : img.pixels) {
    if (config.noise_std > 0) v += rng.normal() * config.noise_std;
    v = quantize8(v);
  }

  img.validate();
  pan.validate();
  return {std::move(img), std::move(pan)};
}

// ---------------------------------------------------------------------------
// dataset I/O

namespace {

constexpr int kSchemaVersion = 1;

}  // namespace

DatasetManifestSummary write_dataset(const std::vector<Scene>& scenes,
                                     const Vocabulary& vocab,
                                     const std::string& dir) {
  vocab.validate();
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "images", ec);
  fs::create_directories(fs::path(dir) / "idmaps", ec);
  if (ec) throw IoError("cannot create dataset directory: " + dir);

  json manifest;
  manifest["schema_version"] = kSchemaVersion;
  json vocab_json = json::array();
  for (const Category& c : vocab.categories) {
    vocab_json.push_back({{"id", c.id},
                          {"label", c.label},
                          {"is_thing", c.is_thing},
                          {"is_seen", vocab.seen_mask[static_cast<std::size_t>(
                              c.id)]}});
  }
  manifest["vocabulary"] = vocab_json;

  json images = json::array();
  for (const Scene& scene : scenes) {
    const Image& img = scene.first;
    const PanopticSegmentation& pan = scene.second;
    img.validate();
    pan.validate();
    std::string image_file = "images/" + img.image_id + ".png";
    std::string idmap_file = "idmaps/" + img.image_id + ".png";

    std::vector<std::uint8_t> rgb(img.pixels.size());
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
      rgb[i] = static_cast<std::uint8_t>(
          std::lround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
    png::write_rgb8((fs::path(dir) / image_file).string(), img.h, img.w, rgb);

    std::vector<std::uint16_t> ids(pan.id_map.size());
    for (std::size_t i = 0; i < pan.id_map.size(); ++i) {
      if (pan.id_map[i] < 0 || pan.id_map[i] > 0xffff)
        throw ValidationError("segment id out of 16-bit range");
      ids[i] = static_cast<std::uint16_t>(pan.id_map[i]);
    }
    png::write_gray16((fs::path(dir) / idmap_file).string(), pan.h, pan.w, ids);

    json segs = json::array();
    for (const SegmentRecord& s : pan.segments)
      segs.push_back({{"id", s.segment_id}, {"category_id", s.category_id}});
    images.push_back({{"image_id", img.image_id},
                      {"image_file", image_file},
                      {"idmap_file", idmap_file},
                      {"segments", segs}});
  }
  manifest["images"] = images;

  std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  std::ofstream out(manifest_path);
  if (!out) throw IoError("cannot write manifest: " + manifest_path);
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("failed writing manifest: " + manifest_path);

  return {static_cast<int>(scenes.size()), vocab.size(), manifest_path};
}

std::pair<std::vector<Scene>, Vocabulary> read_dataset(const std::string& dir) {
  std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest: " + manifest_path);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw IoError("cannot parse manifest " + manifest_path + ": " + e.what());
  }
  if (!manifest.contains("schema_version") ||
      manifest["schema_version"].get<int>() != kSchemaVersion)
    throw ValidationError("manifest " + manifest_path +
                          ": unsupported schema version");

  Vocabulary vocab;
  for (const json& c : manifest.at("vocabulary")) {
    Category cat;
    cat.id = c.at("id").get<int>();
    cat.label = c.at("label").get<std::string>();
    cat.is_thing = c.at("is_thing").get<bool>();
    vocab.categories.push_back(cat);
    vocab.seen_mask.push_back(c.at("is_seen").get<bool>());
  }
  vocab.validate();

  std::vector<Scene> scenes;
  for (const json& entry : manifest.at("images")) {
    std::string image_file = entry.at("image_file").get<std::string>();
    std::string idmap_file = entry.at("idmap_file").get<std::string>();
    std::string image_path = (fs::path(dir) / image_file).string();
    std::string idmap_path = (fs::path(dir) / idmap_file).string();

    Image img;
    img.image_id = entry.at("image_id").get<std::string>();
    std::vector<std::uint8_t> rgb;
    png::read_rgb8(image_path, img.h, img.w, rgb);
    img.pixels.resize(rgb.size());
    for (std::size_t i = 0; i < rgb.size(); ++i)
      img.pixels[i] = static_cast<double>(rgb[i]) / 255.0;

    PanopticSegmentation pan;
    pan.image_id = img.image_id;
    std::vector<std::uint16_t> ids;
    png::read_gray16(idmap_path, pan.h, pan.w, ids);
    pan.id_map.assign(ids.begin(), ids.end());
    for (const json& s : entry.at("segments"))
      pan.segments.push_back(
          {s.at("id").get<int>(), s.at("category_id").get<int>()});

    img.validate();
    try {
      pan.validate();
    } catch (const ValidationError& e) {
      throw ValidationError(std::string(e.what()) + " (while loading " +
                            idmap_path + ")");
    }
    for (const SegmentRecord& s : pan.segments)
      vocab.category(s.category_id);  // category validity
    scenes.emplace_back(std::move(img), std::move(pan));
  }
  return {std::move(scenes), std::move(vocab)};
}

}  // namespace cseg
