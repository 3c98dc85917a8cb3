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

#include "conceptseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace cseg {

void PQReport::accumulate(const PQReport& other) {
  for (const auto& [cat, counts] : other.per_category) {
    Counts& mine = per_category[cat];
    mine.iou_sum += counts.iou_sum;
    mine.tp += counts.tp;
    mine.fp += counts.fp;
    mine.fn += counts.fn;
  }
}

void PQReport::finalize(const Vocabulary& vocab) {
  double pq_acc = 0, sq_acc = 0, rq_acc = 0;
  double pq_things_acc = 0, pq_stuff_acc = 0;
  int n = 0, n_things = 0, n_stuff = 0;
  for (const auto& [cat, counts] : per_category) {
    if (counts.tp + counts.fp + counts.fn == 0) continue;
    pq_acc += counts.pq();
    sq_acc += counts.sq();
    rq_acc += counts.rq();
    ++n;
    if (vocab.category(cat).is_thing) {
      pq_things_acc += counts.pq();
      ++n_things;
    } else {
      pq_stuff_acc += counts.pq();
      ++n_stuff;
    }
  }
  pq = n ? pq_acc / n : 0.0;
  sq = n ? sq_acc / n : 0.0;
  rq = n ? rq_acc / n : 0.0;
  pq_things = n_things ? pq_things_acc / n_things : 0.0;
  pq_stuff = n_stuff ? pq_stuff_acc / n_stuff : 0.0;
}

PQReport panoptic_quality(const PanopticSegmentation& pred,
                          const PanopticSegmentation& gt,
                          const Vocabulary& vocab) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw ValidationError("panoptic_quality: dimension mismatch");
  pred.validate();
  gt.validate();

  // pixel areas and pairwise intersections via one joint pass
  std::map<int, std::int64_t> pred_area, gt_area;
  std::map<std::pair<int, int>, std::int64_t> inter;
  for (std::size_t i = 0; i < gt.id_map.size(); ++i) {
    int p = pred.id_map[i], g = gt.id_map[i];
    if (p != 0) pred_area[p]++;
    if (g != 0) gt_area[g]++;
    if (p != 0 && g != 0) inter[{p, g}]++;
  }

  std::map<int, int> pred_cat, gt_cat;
  for (const SegmentRecord& s : pred.segments) pred_cat[s.segment_id] = s.category_id;
  for (const SegmentRecord& s : gt.segments) gt_cat[s.segment_id] = s.category_id;

  PQReport report;
  std::set<int> matched_pred, matched_gt;
  for (const auto& [pair, overlap] : inter) {
    auto [p, g] = pair;
    if (pred_cat.at(p) != gt_cat.at(g)) continue;
    double uni = static_cast<double>(pred_area[p] + gt_area[g] - overlap);
    double iou = uni > 0 ? static_cast<double>(overlap) / uni : 0.0;
    if (iou > 0.5) {  // IoU > 0.5 makes the match unique
      report.per_category[gt_cat.at(g)].iou_sum += iou;
      report.per_category[gt_cat.at(g)].tp += 1;
      matched_pred.insert(p);
      matched_gt.insert(g);
    }
  }
  for (const SegmentRecord& s : pred.segments)
    if (!matched_pred.count(s.segment_id))
      report.per_category[s.category_id].fp += 1;
  for (const SegmentRecord& s : gt.segments)
    if (!matched_gt.count(s.segment_id))
      report.per_category[s.category_id].fn += 1;

  report.finalize(vocab);
  return report;
}

// ---------------------------------------------------------------------------

void IouCounts::accumulate(const std::vector<int>& pred_semantic,
                           const std::vector<int>& gt_semantic) {
  if (pred_semantic.size() != gt_semantic.size())
    throw ValidationError("mean_iou: dimension mismatch");
  std::set<int> cats;
  for (std::size_t i = 0; i < gt_semantic.size(); ++i) {
    if (gt_semantic[i] == kVoidLabel) continue;
    cats.insert(gt_semantic[i]);
    if (pred_semantic[i] != kVoidLabel) cats.insert(pred_semantic[i]);
  }
  for (int c : cats) {
    auto& [inter, uni] = inter_union[c];
    for (std::size_t i = 0; i < gt_semantic.size(); ++i) {
      if (gt_semantic[i] == kVoidLabel) continue;
      bool in_p = pred_semantic[i] == c;
      bool in_g = gt_semantic[i] == c;
      if (in_p && in_g) ++inter;
      if (in_p || in_g) ++uni;
    }
  }
}

MeanIouReport IouCounts::report() const {
  MeanIouReport out;
  double acc = 0.0;
  int n = 0;
  for (const auto& [cat, iu] : inter_union) {
    if (iu.second == 0) continue;
    double iou = static_cast<double>(iu.first) / static_cast<double>(iu.second);
    out.per_category_iou[cat] = iou;
    acc += iou;
    ++n;
  }
  out.miou = n ? acc / n : 0.0;
  return out;
}

MeanIouReport mean_iou(const std::vector<int>& pred_semantic,
                       const std::vector<int>& gt_semantic,
                       const Vocabulary& vocab) {
  for (int c : pred_semantic)
    if (c != kVoidLabel) vocab.category(c);
  for (int c : gt_semantic)
    if (c != kVoidLabel) vocab.category(c);
  IouCounts counts;
  counts.accumulate(pred_semantic, gt_semantic);
  return counts.report();
}

// ---------------------------------------------------------------------------

namespace {

double mask_iou(const std::vector<std::uint8_t>& a,
                const std::vector<std::uint8_t>& b) {
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    bool pa = a[i] != 0, pb = b[i] != 0;
    if (pa && pb) ++inter;
    if (pa || pb) ++uni;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// 101-point interpolated average precision from a TP/FP flag sequence sorted
// by descending score.
double average_precision(const std::vector<bool>& is_tp, int total_gt) {
  if (total_gt == 0) return 0.0;
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (bool flag : is_tp) {
    if (flag)
      ++tp;
    else
      ++fp;
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / total_gt);
  }
  // 101 recall points, each taking the max precision among samples at or
  // beyond that recall (recall is non-decreasing along the sequence)
  double ap = 0.0;
  for (int ri = 0; ri <= 100; ++ri) {
    double r = ri / 100.0;
    double best = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i)
      if (recall[i] >= r) best = std::max(best, precision[i]);
    ap += best;
  }
  return ap / 101.0;
}

}  // namespace

double instance_map_multi(
    const std::vector<std::vector<InstancePrediction>>& preds,
    const std::vector<std::vector<GtInstance>>& gts) {
  if (preds.size() != gts.size())
    throw ValidationError("instance_map: image count mismatch");

  std::set<int> categories;
  for (const auto& image_gts : gts)
    for (const GtInstance& g : image_gts) categories.insert(g.category_id);
  if (categories.empty()) return 0.0;

  std::vector<double> thresholds;
  for (int i = 0; i < 10; ++i) thresholds.push_back(0.5 + 0.05 * i);

  double map_acc = 0.0;
  for (int cat : categories) {
    int total_gt = 0;
    for (const auto& image_gts : gts)
      for (const GtInstance& g : image_gts)
        if (g.category_id == cat) ++total_gt;

    double ap_acc = 0.0;
    for (double threshold : thresholds) {
      // gather predictions of this category across images, sorted by score
      // descending; ties keep insertion order (stable sort)
      struct Ref {
        double score;
        std::size_t image, index;
      };
      std::vector<Ref> refs;
      for (std::size_t im = 0; im < preds.size(); ++im)
        for (std::size_t pi = 0; pi < preds[im].size(); ++pi)
          if (preds[im][pi].category_id == cat)
            refs.push_back({preds[im][pi].score, im, pi});
      std::stable_sort(refs.begin(), refs.end(),
                       [](const Ref& a, const Ref& b) { return a.score > b.score; });

      std::vector<std::set<std::size_t>> used(gts.size());
      std::vector<bool> is_tp;
      for (const Ref& ref : refs) {
        const InstancePrediction& pred = preds[ref.image][ref.index];
        double best_iou = 0.0;
        std::size_t best_gt = 0;
        bool found = false;
        for (std::size_t gi = 0; gi < gts[ref.image].size(); ++gi) {
          const GtInstance& g = gts[ref.image][gi];
          if (g.category_id != cat) continue;
          if (used[ref.image].count(gi)) continue;
          double iou = mask_iou(pred.mask, g.mask);
          if (iou >= threshold && iou > best_iou) {
            best_iou = iou;
            best_gt = gi;
            found = true;
          }
        }
        if (found) {
          used[ref.image].insert(best_gt);
          is_tp.push_back(true);
        } else {
          is_tp.push_back(false);
        }
      }
      ap_acc += average_precision(is_tp, total_gt);
    }
    map_acc += ap_acc / static_cast<double>(thresholds.size());
  }
  return map_acc / static_cast<double>(categories.size());
}

double instance_map(const std::vector<InstancePrediction>& preds,
                    const std::vector<GtInstance>& gts) {
  return instance_map_multi({preds}, {gts});
}

ConceptPRReport concept_precision_recall(const std::vector<int>& predicted,
                                         const std::vector<int>& ground_truth) {
  std::set<int> p(predicted.begin(), predicted.end());
  std::set<int> g(ground_truth.begin(), ground_truth.end());
  std::set<int> inter;
  std::set_intersection(p.begin(), p.end(), g.begin(), g.end(),
                        std::inserter(inter, inter.begin()));
  ConceptPRReport report;
  if (!p.empty())
    report.precision =
        static_cast<double>(inter.size()) / static_cast<double>(p.size());
  if (!g.empty())
    report.recall =
        static_cast<double>(inter.size()) / static_cast<double>(g.size());
  return report;
}

}  // namespace cseg
