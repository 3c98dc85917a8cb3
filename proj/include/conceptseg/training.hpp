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

#include <optional>
#include <string>
#include <vector>

#include "conceptseg/concepts.hpp"
#include "conceptseg/model.hpp"

namespace cseg {

// ---------------------------------------------------------------------------
// loss primitives (value level)

// 1 - (2*sum(p*t) + 1) / (sum(p) + sum(t) + 1)
double dice_loss(const Tensor& pred_probs, const Tensor& target);
// mean over pixels of numerically stable BCE on logits
double pixel_bce_loss(const Tensor& pred_logits, const Tensor& target);

// ---------------------------------------------------------------------------
// matching

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (query, target), ascending query
  std::vector<int> unmatched_queries;      // ascending

  double total_cost(const Tensor& cost) const {
    double acc = 0.0;
    for (const auto& [q, t] : pairs) acc += cost(q, t);
    return acc;
  }
};

// Minimum-cost injective assignment covering min(K, T) pairs. Among equal
// optima the lexicographically smallest pair list is returned.
MatchResult hungarian_match(const Tensor& cost);

// ---------------------------------------------------------------------------
// targets

struct RasterTarget {
  int segment_id = 0;
  int category_id = 0;
  Tensor mask;  // 1 x (gh*gw), values in {0,1}
};

// Area-majority downsampling of the ground-truth id map to the feature grid.
// Ties go to the smaller segment id. Targets that end up with zero cells are
// dropped (a warning is printed).
std::vector<RasterTarget> rasterize_targets(const PanopticSegmentation& gt,
                                            int stride, int grid_h, int grid_w);

// ---------------------------------------------------------------------------
// composite loss

struct TrainConfig {
  double lambda_cls = 2.0;
  double lambda_pixel = 5.0;
  double lambda_dice = 5.0;
  double learning_rate = 1e-4;
  double weight_decay = 0.05;
  int epochs = 1;
  int steps = 0;  // when > 0, wins over epochs
  int batch_size = 2;
  std::uint64_t seed = 1;
  std::string precision = "double";
  bool aux_supervision = true;
  bool freeze_backbone = true;
  bool rematch_per_layer = false;
  double no_object_weight = 0.1;

  void validate() const;
};

struct LossBreakdown {
  double total = 0.0;
  double cls = 0.0;
  double pixel = 0.0;
  double dice = 0.0;
  struct LayerTerms {
    double cls = 0.0, pixel = 0.0, dice = 0.0;
  };
  std::vector<LayerTerms> per_layer;
};

// Graph-facing per-layer prediction: class scores are pre-softmax logits
// (log-probabilities are derived internally), mask logits at grid resolution.
struct LayerPrediction {
  ad::Var class_scores;  // K x (n+1)
  ad::Var mask_logits;   // K x (gh*gw)
};

struct LossGraphResult {
  ad::Var total;
  LossBreakdown breakdown;
  MatchResult final_match;
};

// Hungarian-matched set loss with deep supervision. Matching runs on the
// final layer's costs (optionally re-run per layer); matched queries are
// supervised on class and mask, unmatched ones only toward no-object with a
// down-weighted cross entropy. `target_class_rows` gives each target's row
// in the classification table.
LossGraphResult compute_loss_graph(const std::vector<LayerPrediction>& layers,
                                   const std::vector<RasterTarget>& targets,
                                   const std::vector<int>& target_class_rows,
                                   const TrainConfig& cfg);

// Value-level flavor over per-layer (class probabilities, mask logits),
// rasterizing the panoptic ground truth internally. `class_row_of_category`
// maps a category id to its table row.
LossBreakdown compute_loss(
    const std::vector<std::pair<Tensor, Tensor>>& layer_probs_and_logits,
    const PanopticSegmentation& targets, int stride, int grid_h, int grid_w,
    const std::vector<int>& class_row_of_category, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// checkpointing

void save_checkpoint(const std::string& path, const SegmentationModel& model,
                     std::uint64_t vocabulary_hash);
// Reads the header only (model config + vocabulary hash).
std::pair<ModelConfig, std::uint64_t> read_checkpoint_header(
    const std::string& path);
// Loads tensors into an existing model; shapes must match.
void load_checkpoint(const std::string& path, SegmentationModel& model,
                     std::optional<std::uint64_t> expect_vocab_hash);

// ---------------------------------------------------------------------------
// training loop

struct FitResult {
  std::vector<LossBreakdown> step_losses;
  std::string checkpoint_path;
  std::string loss_log_path;
};

// Deterministic single-threaded loop: seeded scene order, fixed batch
// composition, AdamW updates. Aborts with NumericalError when a loss
// component goes non-finite.
FitResult fit(SegmentationModel& model, const std::vector<Scene>& scenes,
              const Vocabulary& vocab, const CategoryEmbeddingTable& table,
              const ConceptProvider& provider, const TextEncoderSpec& encoder,
              const TrainConfig& cfg, const std::string& out_dir);

}  // namespace cseg
