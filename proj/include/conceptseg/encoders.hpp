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

#include <map>
#include <string>
#include <vector>

#include "conceptseg/nn.hpp"
#include "conceptseg/synth.hpp"
#include "conceptseg/tensor.hpp"

namespace cseg {

// Trimmed, case-folded label used for uniqueness and for hashing into the
// synthetic embedding space.
std::string normalize_label(const std::string& label);

enum class TextEncoderMode { SyntheticHash, LookupTable, ExternalAdapter };

TextEncoderMode text_encoder_mode_from_string(const std::string& s);

struct TextEncoderSpec {
  TextEncoderMode mode = TextEncoderMode::SyntheticHash;
  std::int64_t dim = 32;
  std::uint64_t seed = 0;
  std::string file;  // lookup-table / external-adapter source

  void validate() const;
};

// Row-per-category unit-norm embeddings in the shared text/vision space.
struct CategoryEmbeddingTable {
  Tensor vectors;  // n x dim
  std::vector<std::string> labels;
  std::int64_t dim = 0;

  void validate() const;
};

// Deterministic text embedding. In synthetic-hash mode each normalized label
// maps to a pseudo-random unit vector seeded by (hash(label), spec.seed);
// identical labels yield identical rows. Lookup and external-adapter modes
// read a JSON file of label -> vector and re-normalize on load.
CategoryEmbeddingTable encode_text(const std::vector<std::string>& labels,
                                   const TextEncoderSpec& spec);

// JSON object mapping label -> list of reals. Vectors are re-normalized.
std::map<std::string, std::vector<double>> load_embedding_file(
    const std::string& path);
void write_embedding_file(const std::string& path,
                          const std::map<std::string, std::vector<double>>& m);

// ---------------------------------------------------------------------------
// visual backbone

// Spatial feature grid at a fixed stride relative to the input image.
struct FeatureGrid {
  int h = 0, w = 0;   // grid cells
  int stride = 4;
  Tensor features;    // (h*w) x dim
};

// Graph-facing flavor used while a tape is alive.
struct GridVar {
  int h = 0, w = 0;
  int stride = 4;
  ad::Var features;
};

// Two stages of (3x3 conv -> gelu -> 2x downsample) ending at stride 4.
// Frozen by default in the training configuration; parameters live in the
// model's store under the "backbone." prefix.
struct Backbone {
  ad::Var conv1_w, conv1_b;  // (dim/2) x (3*9), 1 x (dim/2)
  ad::Var conv2_w, conv2_b;  // dim x ((dim/2)*9), 1 x dim
  std::int64_t dim = 0;

  static Backbone create(nn::ParamStore& store, std::int64_t dim, Rng& rng);
  GridVar forward(const Image& image) const;
};

// Value-only convenience wrapper.
FeatureGrid encode_image(const Image& image, const Backbone& backbone);

}  // namespace cseg
