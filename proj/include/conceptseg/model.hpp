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

#include <string>
#include <vector>

#include "conceptseg/decoder.hpp"
#include "conceptseg/enhancer.hpp"

namespace cseg {

struct ModelConfig {
  std::int64_t dim = 64;
  int heads = 8;
  int queries = 100;
  int enhancer_layers = 6;   // N
  int decoder_layers = 9;    // M
  int dsa_points = 4;
  bool dsa_dense = false;
  std::uint64_t init_seed = 1;
  std::uint64_t backbone_seed = 2;

  void validate() const;
};

// Full segmentation stack: frozen-able visual backbone, concept-aware
// enhancer, query decoder, classification extras.
struct SegmentationModel {
  ModelConfig cfg;
  nn::ParamStore store;
  Backbone backbone;
  EnhancerParams enhancer;
  DecoderParams decoder;
  ad::Var query_embed;      // K x dim
  ad::Var no_object;        // 1 x dim
  ad::Var log_temperature;  // 1 x 1

  static SegmentationModel create(const ModelConfig& cfg);
  void set_backbone_frozen(bool frozen) {
    store.set_frozen("backbone.", frozen);
  }

  struct LayerOutputs {
    ad::Var mask_queries;
    ad::Var mask_logits;   // K x (h*w)
    ad::Var class_scores;  // K x (n+1)
    ad::Var class_probs;
  };
  struct ForwardOutputs {
    GridVar global;    // aligned backbone features
    GridVar enhanced;  // concept-enhanced features
    ad::Var refined_concepts;
    std::vector<LayerOutputs> layers;
  };

  // Joint forward over a batch sharing one concept context. member_ids holds
  // the mapped category ids present per image (at least one each).
  std::vector<ForwardOutputs> forward_batch(
      const std::vector<const Image*>& images,
      const std::vector<std::vector<int>>& member_ids,
      const CategoryEmbeddingTable& table) const;

  ForwardOutputs forward_single(const Image& image,
                                const std::vector<int>& member_ids,
                                const CategoryEmbeddingTable& table) const;
};

}  // namespace cseg
