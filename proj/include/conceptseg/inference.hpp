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
#include <optional>
#include <string>
#include <vector>

#include "conceptseg/concepts.hpp"
#include "conceptseg/decoder.hpp"

namespace cseg {

enum class ReweightVariant { Exp, Linear, Quadratic, NormalizedExp };

ReweightVariant reweight_variant_from_string(const std::string& s);
std::string to_string(ReweightVariant v);

// Per-category multiplicative weights over a vocabulary, plus weight 1.0 for
// the no-object column. Categories outside the concept set keep weight 1.0.
struct ReweightVector {
  std::vector<double> weights;  // n+1, no-object last
  ReweightVariant variant = ReweightVariant::Exp;

  static ReweightVector all_ones(int categories);
};

// Applies the chosen confidence-to-weight formula to the merged per-category
// confidences of the mapped concepts.
ReweightVector reweight_vector(const MappedConceptSet& mapped,
                               const Vocabulary& test_vocabulary,
                               ReweightVariant variant);

struct CategoryPrediction {
  int category_id = -1;        // argmax over the real categories
  std::vector<double> probs;   // n+1, aligned with the table plus no-object
};

// Weighted category matching: cosine scores (as in classify) multiplied
// elementwise by the weights before the softmax. `category_ids` maps table
// rows to vocabulary ids (identity for full-vocabulary evaluation, a subset
// in vocabulary-free mode).
std::vector<CategoryPrediction> predict_categories(
    const Tensor& mask_embeddings, const CategoryEmbeddingTable& table,
    const Tensor& no_object, double temperature, const ReweightVector& weights,
    const std::vector<int>& category_ids);

// ---------------------------------------------------------------------------

enum class InferenceMode { OpenVocabulary, VocabularyFree };
InferenceMode inference_mode_from_string(const std::string& s);

struct InferenceConfig {
  InferenceMode mode = InferenceMode::OpenVocabulary;
  std::optional<ReweightVariant> reweight = ReweightVariant::Exp;  // nullopt = off
  double score_threshold = 0.8;
  double overlap_threshold = 0.8;
  int min_area = 4;

  void validate() const;
};

struct InstancePrediction {
  std::vector<std::uint8_t> mask;  // h*w binary
  int category_id = -1;
  double score = 0.0;
};

struct MergeResult {
  PanopticSegmentation panoptic;
  std::map<int, double> segment_scores;  // class prob * mean in-mask sigmoid
};

// Standard panoptic post-processing: queries below the score threshold or
// predicting no-object are dropped; every surviving query competes for
// pixels via class probability x mask sigmoid; a query keeps its owned
// pixels above 0.5 mask probability when they cover enough of its mask and
// area; stuff segments of one category are merged. Ties go to the lower
// query index.
MergeResult panoptic_merge(const Tensor& class_probs,
                           const std::vector<int>& category_ids,
                           const Tensor& mask_logits_imageres, int h, int w,
                           const Vocabulary& vocab, const InferenceConfig& cfg,
                           const std::string& image_id);

// Per-pixel category map; unassigned pixels get kVoidLabel.
inline constexpr int kVoidLabel = -1;
std::vector<int> to_semantic(const PanopticSegmentation& panoptic);

std::vector<InstancePrediction> to_instances(const MergeResult& merged,
                                             const Vocabulary& vocab);

// Bilinear upsampling of K mask-logit rows from the feature grid to image
// resolution.
Tensor upsample_bilinear(const Tensor& rows, int gh, int gw, int out_h,
                         int out_w);

// ---------------------------------------------------------------------------

struct ClusterResult {
  std::vector<int> labels;  // h*w
  Tensor centroids;         // k x dim
  double inertia = 0.0;     // within-cluster sum of squares
};

// Seeded k-means++ with Lloyd iterations (<= 100 or centroid shift < 1e-6).
ClusterResult cluster_features(const FeatureGrid& grid, int k,
                               std::uint64_t seed);

}  // namespace cseg
