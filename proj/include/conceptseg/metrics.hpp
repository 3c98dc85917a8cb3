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

#include "conceptseg/inference.hpp"
#include "conceptseg/synth.hpp"

namespace cseg {

// Panoptic quality with segmentation/recognition factors. Matches are
// same-category segment pairs with pixel-set IoU > 0.5 (unique by
// construction). Unassigned pixels belong to no segment and therefore never
// enter any IoU.
struct PQReport {
  struct Counts {
    double iou_sum = 0.0;
    int tp = 0, fp = 0, fn = 0;
    double pq() const {
      double denom = tp + 0.5 * fp + 0.5 * fn;
      return denom == 0 ? 0.0 : iou_sum / denom;
    }
    double sq() const { return tp == 0 ? 0.0 : iou_sum / tp; }
    double rq() const {
      double denom = tp + 0.5 * fp + 0.5 * fn;
      return denom == 0 ? 0.0 : tp / denom;
    }
  };
  std::map<int, Counts> per_category;
  double pq = 0.0, sq = 0.0, rq = 0.0;
  double pq_things = 0.0, pq_stuff = 0.0;

  // Accumulate counts of another report (same vocabulary), then finalize.
  void accumulate(const PQReport& other);
  void finalize(const Vocabulary& vocab);
};

PQReport panoptic_quality(const PanopticSegmentation& pred,
                          const PanopticSegmentation& gt,
                          const Vocabulary& vocab);

// Per-category IoU over the union of pixels carrying the category in either
// map; pixels void in the ground truth are ignored; categories absent from
// both maps are excluded from the mean.
struct MeanIouReport {
  std::map<int, double> per_category_iou;
  double miou = 0.0;
};

MeanIouReport mean_iou(const std::vector<int>& pred_semantic,
                       const std::vector<int>& gt_semantic,
                       const Vocabulary& vocab);

// Aggregation-friendly intersection/union counts.
struct IouCounts {
  std::map<int, std::pair<std::int64_t, std::int64_t>> inter_union;
  void accumulate(const std::vector<int>& pred_semantic,
                  const std::vector<int>& gt_semantic);
  MeanIouReport report() const;
};

// COCO-style mask mAP: thresholds 0.50:0.05:0.95, greedy score-ordered
// matching, 101-point interpolated precision, averaged over categories with
// at least one ground-truth instance.
struct GtInstance {
  int category_id = -1;
  std::vector<std::uint8_t> mask;
};

double instance_map(const std::vector<InstancePrediction>& preds,
                    const std::vector<GtInstance>& gts);

// Multi-image flavor: instances are grouped per image index.
double instance_map_multi(
    const std::vector<std::vector<InstancePrediction>>& preds,
    const std::vector<std::vector<GtInstance>>& gts);

// Set precision/recall of predicted category ids against ground truth.
struct ConceptPRReport {
  std::optional<double> precision;  // null when the prediction set is empty
  std::optional<double> recall;     // null when the ground truth is empty
};

ConceptPRReport concept_precision_recall(const std::vector<int>& predicted,
                                         const std::vector<int>& ground_truth);

}  // namespace cseg
