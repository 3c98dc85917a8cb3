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

struct DecoderConfig {
  int layers = 9;
  int heads = 8;
  std::int64_t ffn_hidden = 0;  // 0 -> 2*dim
};

// One decoder layer. The cross-attention projection set is shared between
// the concept step and the visual step: both run through `shared_cross`, so
// a gradient update to one is by construction an update to the other.
struct DecoderLayer {
  nn::AttentionBlock shared_cross;
  nn::AttentionBlock self_attn;
  nn::Ffn ffn;
};

// Final mask-query head applied to every layer's queries (deep supervision
// reuses one head).
struct MaskQueryHead {
  nn::LayerNorm ln;
  nn::Linear l1, l2, l3;
  ad::Var operator()(const ad::Var& queries) const;
};

struct DecoderParams {
  std::vector<DecoderLayer> layers;
  MaskQueryHead mask_head;
  static DecoderParams create(nn::ParamStore& store, std::int64_t dim,
                              const DecoderConfig& cfg, Rng& rng);
};

struct DecoderLayerOutput {
  ad::Var queries;       // K x dim, raw layer output before the mask head
  ad::Var mask_queries;  // K x dim, after the mask-query head
  ad::Var mask_logits;   // K x (h*w)
};

// Queries first attend to the image's member-category embeddings, then to
// the enhanced visual features through the same projection set, then to each
// other, then pass an FFN. Mask logits are emitted after every layer.
std::vector<DecoderLayerOutput> decoder_forward(const ad::Var& queries_init,
                                                const ad::Var& concepts,
                                                const GridVar& enhanced,
                                                const DecoderParams& params);

// Inner product between mask queries and grid features: logits[k, p] =
// <q_k, V[p]>.
ad::Var compute_masks(const ad::Var& mask_queries, const GridVar& enhanced);

// Sigmoid-weighted soft pooling of the aligned global features. Rows whose
// total weight falls below eps use the unweighted mean instead.
ad::Var mask_pool(const ad::Var& mask_logits, const GridVar& global_features,
                  double eps = 1e-6);

struct ClassifyOutput {
  ad::Var scores;  // K x (n+1), cosine / temperature
  ad::Var probs;   // row softmax of scores
};

// Cosine similarity between L2-normalized mask embeddings and the category
// table, extended with the learned no-object embedding as the last column,
// scaled by 1/temperature and softmaxed per row.
ClassifyOutput classify_graph(const ad::Var& mask_embeddings,
                              const CategoryEmbeddingTable& table,
                              const ad::Var& no_object,
                              const ad::Var& log_temperature);

// Pre-softmax classification scores (cosine / temperature) with the
// no-object column appended; the weighted matching path reuses exactly this
// computation so unweighted matching reduces to classify bit-for-bit.
Tensor classification_scores(const Tensor& mask_embeddings,
                             const CategoryEmbeddingTable& table,
                             const Tensor& no_object, double temperature);

// Value-level flavor with an explicit positive temperature.
Tensor classify(const Tensor& mask_embeddings,
                const CategoryEmbeddingTable& table, const Tensor& no_object,
                double temperature);

}  // namespace cseg
