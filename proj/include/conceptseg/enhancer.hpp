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

#include <vector>

#include "conceptseg/encoders.hpp"
#include "conceptseg/nn.hpp"

namespace cseg {

// Which categories each image in a batch is allowed to exchange information
// with. batch_categories may be a superset of the union of memberships;
// categories grounded in no image stay completely inert.
struct BatchConceptContext {
  std::vector<int> batch_categories;              // ascending category ids
  std::vector<std::vector<int>> member_positions; // per image, ascending
                                                  // indices into
                                                  // batch_categories
  Tensor embeddings;                              // m x dim

  int batch_size() const { return static_cast<int>(member_positions.size()); }
  int category_count() const {
    return static_cast<int>(batch_categories.size());
  }
  void validate() const;
};

BatchConceptContext make_batch_context(
    const std::vector<std::vector<int>>& member_category_ids,
    const CategoryEmbeddingTable& table,
    const std::vector<int>& extra_category_ids = {});

// B x m additive attention mask: 0 where image i contains batch category j,
// -inf otherwise. Every row keeps at least one 0.
struct AttentionMaskMatrix {
  Tensor values;
  void validate() const;
};

AttentionMaskMatrix build_attention_mask(const BatchConceptContext& context);

// Multi-head cross attention with an additive {0,-inf} mask applied before
// the softmax of every head; masked keys receive exactly zero weight.
ad::Var masked_cross_attention(const ad::Var& queries,
                               const ad::Var& keys_values, const Tensor& mask,
                               const nn::Projections& params, int heads);

// Raw learned-offset sampled attention over a grid (no residual).
GridVar deformable_self_attention(const GridVar& grid,
                                  const nn::DeformableBlock& params);

// ---------------------------------------------------------------------------

struct EnhancerConfig {
  int layers = 6;
  int heads = 8;
  int dsa_points = 4;
  bool dsa_dense = false;  // fall back to ordinary self-attention on the grid
  std::int64_t ffn_hidden = 0;  // 0 -> 2*dim
};

struct EnhancerLayer {
  nn::AttentionBlock text_to_image;
  nn::Ffn text_ffn;
  nn::AttentionBlock image_to_text;
  nn::Ffn image_ffn;
  nn::DeformableBlock dsa;
};

struct EnhancerParams {
  std::vector<EnhancerLayer> layers;
  static EnhancerParams create(nn::ParamStore& store, std::int64_t dim,
                               const EnhancerConfig& cfg, Rng& rng);
};

struct EnhancerResult {
  std::vector<GridVar> enhanced;  // per image, same shape as the input grids
  ad::Var refined_concepts;       // m x dim; rows of unreferenced categories
                                  // are zero
};

// N stacked layers of text-to-image attention, text FFN, masked
// image-to-text attention, image FFN and deformable self attention. Each
// sub-block is wrapped in pre-normalization and a residual connection.
// Per-image computation only ever consumes that image's own grid and member
// categories, so batched and single-image runs agree.
EnhancerResult cave_forward(const BatchConceptContext& context,
                            const std::vector<GridVar>& global_features,
                            const AttentionMaskMatrix& mask,
                            const EnhancerParams& params);

}  // namespace cseg
