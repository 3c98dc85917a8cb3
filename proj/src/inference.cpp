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

#include "conceptseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace cseg {

ReweightVariant reweight_variant_from_string(const std::string& s) {
  if (s == "exp") return ReweightVariant::Exp;
  if (s == "linear") return ReweightVariant::Linear;
  if (s == "quadratic") return ReweightVariant::Quadratic;
  if (s == "normalized-exp") return ReweightVariant::NormalizedExp;
  throw ConfigError("unknown reweight variant: " + s);
}

std::string to_string(ReweightVariant v) {
  switch (v) {
    case ReweightVariant::Exp: return "exp";
    case ReweightVariant::Linear: return "linear";
    case ReweightVariant::Quadratic: return "quadratic";
    case ReweightVariant::NormalizedExp: return "normalized-exp";
  }
  return "?";
}

ReweightVector ReweightVector::all_ones(int categories) {
  ReweightVector v;
  v.weights.assign(static_cast<std::size_t>(categories) + 1, 1.0);
  return v;
}

ReweightVector reweight_vector(const MappedConceptSet& mapped,
                               const Vocabulary& test_vocabulary,
                               ReweightVariant variant) {
  test_vocabulary.validate();
  ReweightVector out = ReweightVector::all_ones(test_vocabulary.size());
  out.variant = variant;
  for (const auto& [category, confidence] : mapped.merged_confidences()) {
    if (category < 0 || category >= test_vocabulary.size())
      throw ValidationError("reweight: mapped category " +
                            std::to_string(category) +
                            " outside the test vocabulary");
    double c = confidence;
    double w;
    switch (variant) {
      case ReweightVariant::Exp: w = std::exp(c); break;
      case ReweightVariant::Linear: w = 1.0 + c; break;
      case ReweightVariant::Quadratic: w = 1.0 + c * c; break;
      case ReweightVariant::NormalizedExp:
        w = 1.0 + (std::exp(c) - 1.0) / (std::exp(1.0) - 1.0);
        break;
      default:
        throw ConfigError("unknown reweight variant");
    }
    out.weights[static_cast<std::size_t>(category)] = w;
  }
  return out;
}

std::vector<CategoryPrediction> predict_categories(
    const Tensor& mask_embeddings, const CategoryEmbeddingTable& table,
    const Tensor& no_object, double temperature, const ReweightVector& weights,
    const std::vector<int>& category_ids) {
  table.validate();
  if (table.vectors.rows() == 0)
    throw ValidationError("predict_categories: empty effective vocabulary");
  if (static_cast<std::int64_t>(category_ids.size()) != table.vectors.rows())
    throw ValidationError("predict_categories: category id map size mismatch");
  if (static_cast<std::int64_t>(weights.weights.size()) !=
      table.vectors.rows() + 1)
    throw ValidationError("predict_categories: weight vector size mismatch");

  std::int64_t k = mask_embeddings.rows();
  std::int64_t n1 = table.vectors.rows() + 1;

  // same score computation as classify, weighted elementwise pre-softmax;
  // all-ones weights therefore reduce to classify exactly
  Tensor scores =
      classification_scores(mask_embeddings, table, no_object, temperature);
  for (std::int64_t i = 0; i < k; ++i)
    for (std::int64_t col = 0; col < n1; ++col)
      scores(i, col) *= weights.weights[static_cast<std::size_t>(col)];

  std::vector<CategoryPrediction> out(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < k; ++i) {
    double mx = scores(i, 0);
    for (std::int64_t col = 1; col < n1; ++col)
      mx = std::max(mx, scores(i, col));
    double denom = 0.0;
    CategoryPrediction& pred = out[static_cast<std::size_t>(i)];
    pred.probs.resize(static_cast<std::size_t>(n1));
    for (std::int64_t col = 0; col < n1; ++col) {
      pred.probs[static_cast<std::size_t>(col)] = std::exp(scores(i, col) - mx);
      denom += pred.probs[static_cast<std::size_t>(col)];
    }
    for (std::int64_t col = 0; col < n1; ++col)
      pred.probs[static_cast<std::size_t>(col)] /= denom;
    std::int64_t best = 0;
    for (std::int64_t col = 1; col < n1 - 1; ++col)
      if (pred.probs[static_cast<std::size_t>(col)] >
          pred.probs[static_cast<std::size_t>(best)])
        best = col;
    pred.category_id = category_ids[static_cast<std::size_t>(best)];
  }
  return out;
}

// ---------------------------------------------------------------------------

InferenceMode inference_mode_from_string(const std::string& s) {
  if (s == "open-vocabulary") return InferenceMode::OpenVocabulary;
  if (s == "vocabulary-free") return InferenceMode::VocabularyFree;
  throw ConfigError("unknown inference mode: " + s);
}

void InferenceConfig::validate() const {
  if (!(score_threshold > 0 && score_threshold <= 1))
    throw ConfigError("inference: score threshold must be in (0,1]");
  if (!(overlap_threshold > 0 && overlap_threshold <= 1))
    throw ConfigError("inference: overlap threshold must be in (0,1]");
  if (min_area < 0) throw ConfigError("inference: min area must be >= 0");
}

MergeResult panoptic_merge(const Tensor& class_probs,
                           const std::vector<int>& category_ids,
                           const Tensor& mask_logits_imageres, int h, int w,
                           const Vocabulary& vocab, const InferenceConfig& cfg,
                           const std::string& image_id) {
  cfg.validate();
  if (!class_probs.all_finite() || !mask_logits_imageres.all_finite())
    throw ValidationError("panoptic_merge: non-finite inputs");
  std::int64_t k = class_probs.rows();
  std::int64_t n1 = class_probs.cols();
  if (static_cast<std::int64_t>(category_ids.size()) != n1 - 1)
    throw ValidationError("panoptic_merge: category id map size mismatch");
  if (mask_logits_imageres.rows() != k ||
      mask_logits_imageres.cols() != static_cast<std::int64_t>(h) * w)
    throw ValidationError("panoptic_merge: mask resolution mismatch");

  struct Kept {
    std::int64_t query;
    int category_id;
    double score;
  };
  std::vector<Kept> kept;
  for (std::int64_t q = 0; q < k; ++q) {
    std::int64_t best = 0;
    for (std::int64_t c = 1; c < n1; ++c)
      if (class_probs(q, c) > class_probs(q, best)) best = c;
    if (best == n1 - 1) continue;  // no-object wins
    double score = class_probs(q, best);
    if (score < cfg.score_threshold) continue;
    kept.push_back({q, category_ids[static_cast<std::size_t>(best)], score});
  }

  MergeResult result;
  result.panoptic.h = h;
  result.panoptic.w = w;
  result.panoptic.image_id = image_id;
  result.panoptic.id_map.assign(static_cast<std::size_t>(h) * w, 0);
  if (kept.empty()) return result;

  std::int64_t hw = static_cast<std::int64_t>(h) * w;
  // per-pixel owner among kept queries: argmax of score * sigmoid, ties to
  // the earlier kept entry (lower query index)
  std::vector<int> owner(static_cast<std::size_t>(hw), -1);
  std::vector<double> best_val(static_cast<std::size_t>(hw),
                               -std::numeric_limits<double>::infinity());
  std::vector<std::vector<double>> sig(kept.size());
  for (std::size_t ki = 0; ki < kept.size(); ++ki) {
    sig[ki].resize(static_cast<std::size_t>(hw));
    for (std::int64_t p = 0; p < hw; ++p) {
      double x = mask_logits_imageres(kept[ki].query, p);
      double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
      sig[ki][static_cast<std::size_t>(p)] = s;
      double v = kept[ki].score * s;
      if (v > best_val[static_cast<std::size_t>(p)]) {
        best_val[static_cast<std::size_t>(p)] = v;
        owner[static_cast<std::size_t>(p)] = static_cast<int>(ki);
      }
    }
  }

  int next_segment = 1;
  std::map<int, int> stuff_segment_of_category;
  for (std::size_t ki = 0; ki < kept.size(); ++ki) {
    std::vector<std::int64_t> pixels;
    std::int64_t above = 0;
    for (std::int64_t p = 0; p < hw; ++p) {
      bool over_half = sig[ki][static_cast<std::size_t>(p)] > 0.5;
      if (over_half) ++above;
      if (owner[static_cast<std::size_t>(p)] == static_cast<int>(ki) &&
          over_half)
        pixels.push_back(p);
    }
    if (above == 0) continue;
    double coverage =
        static_cast<double>(pixels.size()) / static_cast<double>(above);
    if (coverage < cfg.overlap_threshold) continue;
    if (static_cast<int>(pixels.size()) < cfg.min_area) continue;

    int cat = kept[ki].category_id;
    bool is_thing = vocab.category(cat).is_thing;
    int segment_id;
    if (!is_thing && stuff_segment_of_category.count(cat)) {
      segment_id = stuff_segment_of_category[cat];
    } else {
      segment_id = next_segment++;
      result.panoptic.segments.push_back({segment_id, cat});
      if (!is_thing) stuff_segment_of_category[cat] = segment_id;
    }
    double sig_sum = 0.0;
    for (std::int64_t p : pixels) {
      result.panoptic.id_map[static_cast<std::size_t>(p)] = segment_id;
      sig_sum += sig[ki][static_cast<std::size_t>(p)];
    }
    double mean_sig = sig_sum / static_cast<double>(pixels.size());
    double seg_score = kept[ki].score * mean_sig;
    auto [it, inserted] = result.segment_scores.emplace(segment_id, seg_score);
    if (!inserted) it->second = std::max(it->second, seg_score);
  }

  // drop records of segments that ended up with zero pixels (possible when a
  // stuff segment id was reused but all new pixels were claimed elsewhere)
  std::set<int> present(result.panoptic.id_map.begin(),
                        result.panoptic.id_map.end());
  std::vector<SegmentRecord> cleaned;
  for (const SegmentRecord& s : result.panoptic.segments)
    if (present.count(s.segment_id)) cleaned.push_back(s);
  result.panoptic.segments = std::move(cleaned);
  result.panoptic.validate();
  return result;
}

std::vector<int> to_semantic(const PanopticSegmentation& panoptic) {
  panoptic.validate();
  std::map<int, int> category_of;
  for (const SegmentRecord& s : panoptic.segments)
    category_of[s.segment_id] = s.category_id;
  std::vector<int> semantic(panoptic.id_map.size(), kVoidLabel);
  for (std::size_t i = 0; i < panoptic.id_map.size(); ++i) {
    int id = panoptic.id_map[i];
    if (id != 0) semantic[i] = category_of.at(id);
  }
  return semantic;
}

std::vector<InstancePrediction> to_instances(const MergeResult& merged,
                                             const Vocabulary& vocab) {
  std::vector<InstancePrediction> out;
  for (const SegmentRecord& s : merged.panoptic.segments) {
    if (!vocab.category(s.category_id).is_thing) continue;
    InstancePrediction inst;
    inst.category_id = s.category_id;
    inst.mask.assign(merged.panoptic.id_map.size(), 0);
    for (std::size_t i = 0; i < merged.panoptic.id_map.size(); ++i)
      if (merged.panoptic.id_map[i] == s.segment_id) inst.mask[i] = 1;
    auto it = merged.segment_scores.find(s.segment_id);
    inst.score = it == merged.segment_scores.end() ? 0.0 : it->second;
    out.push_back(std::move(inst));
  }
  return out;
}

Tensor upsample_bilinear(const Tensor& rows, int gh, int gw, int out_h,
                         int out_w) {
  if (rows.cols() != static_cast<std::int64_t>(gh) * gw)
    throw ValidationError("upsample: grid shape mismatch");
  std::int64_t k = rows.rows();
  Tensor out({k, static_cast<std::int64_t>(out_h) * out_w});
  double sy = static_cast<double>(gh) / out_h;
  double sx = static_cast<double>(gw) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    double cy = std::clamp(fy, 0.0, static_cast<double>(gh - 1));
    std::int64_t y0 = static_cast<std::int64_t>(std::floor(cy));
    std::int64_t y1 = std::min<std::int64_t>(y0 + 1, gh - 1);
    double wy = cy - static_cast<double>(y0);
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      double cx = std::clamp(fx, 0.0, static_cast<double>(gw - 1));
      std::int64_t x0 = static_cast<std::int64_t>(std::floor(cx));
      std::int64_t x1 = std::min<std::int64_t>(x0 + 1, gw - 1);
      double wx = cx - static_cast<double>(x0);
      for (std::int64_t q = 0; q < k; ++q) {
        double v00 = rows(q, y0 * gw + x0);
        double v01 = rows(q, y0 * gw + x1);
        double v10 = rows(q, y1 * gw + x0);
        double v11 = rows(q, y1 * gw + x1);
        out(q, static_cast<std::int64_t>(y) * out_w + x) =
            (1 - wy) * ((1 - wx) * v00 + wx * v01) +
            wy * ((1 - wx) * v10 + wx * v11);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

ClusterResult cluster_features(const FeatureGrid& grid, int k,
                               std::uint64_t seed) {
  std::int64_t n = grid.features.rows();
  std::int64_t d = grid.features.cols();
  if (k < 1) throw ValidationError("cluster_features: k must be >= 1");
  if (k > n)
    throw ValidationError("cluster_features: k exceeds the number of positions");

  Rng rng(seed);
  const Tensor& x = grid.features;
  auto dist2 = [&](std::int64_t row, const Tensor& centroids,
                   std::int64_t c) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      double diff = x(row, j) - centroids(c, j);
      acc += diff * diff;
    }
    return acc;
  };

  // k-means++ seeding
  Tensor centroids({k, d});
  std::vector<double> best(static_cast<std::size_t>(n),
                           std::numeric_limits<double>::infinity());
  std::int64_t first = rng.uniform_int(static_cast<int>(n));
  for (std::int64_t j = 0; j < d; ++j) centroids(0, j) = x(first, j);
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      best[static_cast<std::size_t>(i)] =
          std::min(best[static_cast<std::size_t>(i)], dist2(i, centroids, c - 1));
      total += best[static_cast<std::size_t>(i)];
    }
    std::int64_t chosen = n - 1;
    if (total > 0) {
      double r = rng.uniform() * total;
      double acc = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        acc += best[static_cast<std::size_t>(i)];
        if (acc >= r) {
          chosen = i;
          break;
        }
      }
    } else {
      chosen = rng.uniform_int(static_cast<int>(n));
    }
    for (std::int64_t j = 0; j < d; ++j) centroids(c, j) = x(chosen, j);
  }

  ClusterResult result;
  result.labels.assign(static_cast<std::size_t>(n), 0);
  for (int iter = 0; iter < 100; ++iter) {
    // assignment
    for (std::int64_t i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      int bc = 0;
      for (int c = 0; c < k; ++c) {
        double dd = dist2(i, centroids, c);
        if (dd < bd) {
          bd = dd;
          bc = c;
        }
      }
      result.labels[static_cast<std::size_t>(i)] = bc;
    }
    // update
    Tensor next({k, d});
    std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
    for (std::int64_t i = 0; i < n; ++i) {
      int c = result.labels[static_cast<std::size_t>(i)];
      counts[static_cast<std::size_t>(c)]++;
      for (std::int64_t j = 0; j < d; ++j) next(c, j) += x(i, j);
    }
    double shift = 0.0;
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) {
        // empty cluster: grab the point farthest from its centroid
        std::int64_t far_i = 0;
        double far_d = -1.0;
        for (std::int64_t i = 0; i < n; ++i) {
          double dd =
              dist2(i, centroids, result.labels[static_cast<std::size_t>(i)]);
          if (dd > far_d) {
            far_d = dd;
            far_i = i;
          }
        }
        for (std::int64_t j = 0; j < d; ++j) next(c, j) = x(far_i, j);
        counts[static_cast<std::size_t>(c)] = 1;
        result.labels[static_cast<std::size_t>(far_i)] = c;
      }
      double cell_shift = 0.0;
      for (std::int64_t j = 0; j < d; ++j) {
        next(c, j) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
        double diff = next(c, j) - centroids(c, j);
        cell_shift += diff * diff;
      }
      shift = std::max(shift, std::sqrt(cell_shift));
    }
    centroids = next;
    if (shift < 1e-6) break;
  }

  result.inertia = 0.0;
  for (std::int64_t i = 0; i < n; ++i)
    result.inertia +=
        dist2(i, centroids, result.labels[static_cast<std::size_t>(i)]);
  result.centroids = centroids;
  return result;
}

}  // namespace cseg
