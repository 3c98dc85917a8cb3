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

#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "conceptseg/common.hpp"

namespace cseg {

// ---------------------------------------------------------------------------
// core dataset types

enum class ShapeFamily {
  Circle,
  Rectangle,
  Triangle,
  StripedBackground,
  GradientBackground,
};

ShapeFamily shape_family_from_string(const std::string& s);
std::string to_string(ShapeFamily f);

struct Category {
  int id = 0;
  std::string label;
  bool is_thing = true;
};

struct Vocabulary {
  std::vector<Category> categories;  // ordered by id, ids are 0..n-1
  std::vector<bool> seen_mask;       // per category

  void validate() const;
  int size() const { return static_cast<int>(categories.size()); }
  const Category& category(int id) const;
  // -1 when the label is unknown
  int find_label(const std::string& label) const;
  std::vector<int> seen_ids() const;
  std::vector<int> unseen_ids() const;
  std::uint64_t hash() const;
};

// Pixels are stored row-major as (y, x, channel) in [0,1]. Rendered scenes
// quantize to the 8-bit grid so the PNG round trip is exact.
struct Image {
  int h = 0, w = 0;
  std::vector<double> pixels;  // h*w*3
  std::string image_id;

  double& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * w + x) * 3 + c];
  }
  double at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * w + x) * 3 + c];
  }
  void validate() const;
};

struct SegmentRecord {
  int segment_id = 0;  // positive
  int category_id = 0;
};

struct PanopticSegmentation {
  int h = 0, w = 0;
  std::vector<int> id_map;  // h*w, 0 = unassigned
  std::vector<SegmentRecord> segments;
  std::string image_id;

  int id_at(int y, int x) const {
    return id_map[static_cast<std::size_t>(y) * w + x];
  }
  void validate() const;
  // category of a segment id; throws ValidationError when unknown
  int category_of(int segment_id) const;
  std::vector<int> present_categories() const;  // sorted unique
};

struct SceneConfig {
  int h = 32, w = 32;
  int max_objects = 3;
  // category id -> renderable family; every category that can appear must be
  // mapped. Exactly the stuff categories map to background families.
  std::map<int, ShapeFamily> shape_palette;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
  // restrict drawn categories (empty = all palette categories); used to keep
  // held-out categories out of the training scenes
  std::vector<int> category_filter;

  void validate() const;
};

// Deterministic palette assignment: things cycle through circle, rectangle,
// triangle; stuff alternate gradient / striped backgrounds.
std::map<int, ShapeFamily> default_palette(const Vocabulary& vocab);

// Base color of a category, spaced around the hue wheel; each category gets
// a visually distinct band so a small frozen backbone can separate them.
std::array<double, 3> category_color(int category_id);

// ---------------------------------------------------------------------------
// operations

// Renders one scene: a stuff background plus up to max_objects shapes drawn
// in order (later shapes overwrite earlier ones). Pure function of
// (config, vocabulary).
std::pair<Image, PanopticSegmentation> generate_scene(const SceneConfig& config,
                                                      const Vocabulary& vocab);

struct DatasetManifestSummary {
  int scene_count = 0;
  int category_count = 0;
  std::string manifest_path;
};

using Scene = std::pair<Image, PanopticSegmentation>;

DatasetManifestSummary write_dataset(const std::vector<Scene>& scenes,
                                     const Vocabulary& vocab,
                                     const std::string& dir);

std::pair<std::vector<Scene>, Vocabulary> read_dataset(const std::string& dir);

}  // namespace cseg
