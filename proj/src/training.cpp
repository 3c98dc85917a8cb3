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

#include "conceptseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>

#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace cseg {

using ad::Var;

double dice_loss(const Tensor& pred_probs, const Tensor& target) {
  if (!pred_probs.same_shape(target))
    throw ValidationError("dice_loss: shape mismatch");
  double inter = 0.0, ps = 0.0, ts = 0.0;
  for (std::int64_t i = 0; i < pred_probs.numel(); ++i) {
    double p = pred_probs[i], t = target[i];
    if (!(p >= 0.0 && p <= 1.0))
      throw ValidationError("dice_loss: prediction out of [0,1]");
    if (t != 0.0 && t != 1.0)
      throw ValidationError("dice_loss: target must be binary");
    inter += p * t;
    ps += p;
    ts += t;
  }
  return 1.0 - (2.0 * inter + 1.0) / (ps + ts + 1.0);
}

double pixel_bce_loss(const Tensor& pred_logits, const Tensor& target) {
  if (!pred_logits.same_shape(target))
    throw ValidationError("pixel_bce_loss: shape mismatch");
  double acc = 0.0;
  for (std::int64_t i = 0; i < pred_logits.numel(); ++i) {
    double x = pred_logits[i], t = target[i];
    acc += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  return acc / static_cast<double>(pred_logits.numel());
}

// ---------------------------------------------------------------------------
// assignment

namespace {

// O(n^3) shortest augmenting path solver on a square matrix.
std::vector<int> solve_square_assignment(const Tensor& cost) {
  int n = static_cast<int>(cost.rows());
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(n) + 1, 0);
  std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1,
                             std::numeric_limits<double>::infinity());
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      int i0 = p[static_cast<std::size_t>(j0)], j1 = 0;
      double delta = std::numeric_limits<double>::infinity();
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                     v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    if (p[static_cast<std::size_t>(j)] > 0)
      row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] =
          j - 1;
  return row_to_col;
}

// Minimum total cost over injective assignments covering min(rows(sub),
// cols(sub)) pairs, where `rows`/`cols` select a submatrix of `cost`.
double min_assignment_cost(const Tensor& cost, const std::vector<int>& rows,
                           const std::vector<int>& cols) {
  int kq = static_cast<int>(rows.size());
  int kt = static_cast<int>(cols.size());
  if (kq == 0 || kt == 0) return 0.0;
  int n = std::max(kq, kt);
  Tensor square({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      square(i, j) = (i < kq && j < kt)
                         ? cost(rows[static_cast<std::size_t>(i)],
                                cols[static_cast<std::size_t>(j)])
                         : 0.0;
  std::vector<int> row_to_col = solve_square_assignment(square);
  // sum real pairs ascending by query for reproducible rounding
  double total = 0.0;
  for (int i = 0; i < kq; ++i) {
    int j = row_to_col[static_cast<std::size_t>(i)];
    if (j >= 0 && j < kt)
      total += cost(rows[static_cast<std::size_t>(i)],
                    cols[static_cast<std::size_t>(j)]);
  }
  return total;
}

}  // namespace

MatchResult hungarian_match(const Tensor& cost) {
  if (cost.ndim() != 2)
    throw ValidationError("hungarian_match: cost must be 2-D");
  if (!cost.all_finite())
    throw ValidationError("hungarian_match: costs must be finite");
  int kq = static_cast<int>(cost.rows());
  int kt = static_cast<int>(cost.cols());
  std::vector<int> all_q(static_cast<std::size_t>(kq));
  std::vector<int> all_t(static_cast<std::size_t>(kt));
  for (int i = 0; i < kq; ++i) all_q[static_cast<std::size_t>(i)] = i;
  for (int j = 0; j < kt; ++j) all_t[static_cast<std::size_t>(j)] = j;
  const double optimum = min_assignment_cost(cost, all_q, all_t);
  const double tol = 1e-9 * std::max(1.0, std::abs(optimum));

  // Greedy lexicographic refinement: fix the smallest (query, target) pair
  // whose completion still reaches the optimum, then recurse on the rest.
  MatchResult result;
  int need = std::min(kq, kt);
  std::vector<bool> target_used(static_cast<std::size_t>(kt), false);
  double fixed_cost = 0.0;
  int next_query = 0;
  for (int position = 0; position < need; ++position) {
    bool placed = false;
    for (int q = next_query; q < kq && !placed; ++q) {
      if (kq - q < need - position) break;  // not enough queries left
      for (int t = 0; t < kt && !placed; ++t) {
        if (target_used[static_cast<std::size_t>(t)]) continue;
        std::vector<int> rem_q, rem_t;
        for (int qq = q + 1; qq < kq; ++qq) rem_q.push_back(qq);
        for (int tt = 0; tt < kt; ++tt)
          if (tt != t && !target_used[static_cast<std::size_t>(tt)])
            rem_t.push_back(tt);
        if (static_cast<int>(std::min(rem_q.size(), rem_t.size())) <
            need - position - 1)
          continue;
        double completion = min_assignment_cost(cost, rem_q, rem_t);
        if (std::abs(fixed_cost + cost(q, t) + completion - optimum) <= tol) {
          result.pairs.emplace_back(q, t);
          target_used[static_cast<std::size_t>(t)] = true;
          fixed_cost += cost(q, t);
          next_query = q + 1;
          placed = true;
        }
      }
    }
    if (!placed)
      throw NumericalError("hungarian_match: refinement failed to complete");
  }
  std::vector<bool> matched(static_cast<std::size_t>(kq), false);
  for (const auto& [q, t] : result.pairs)
    matched[static_cast<std::size_t>(q)] = true;
  for (int q = 0; q < kq; ++q)
    if (!matched[static_cast<std::size_t>(q)]) result.unmatched_queries.push_back(q);
  return result;
}

// ---------------------------------------------------------------------------

std::vector<RasterTarget> rasterize_targets(const PanopticSegmentation& gt,
                                            int stride, int grid_h,
                                            int grid_w) {
  gt.validate();
  if (stride < 1) throw ValidationError("rasterize_targets: bad stride");
  std::vector<int> cell_ids(static_cast<std::size_t>(grid_h) * grid_w, 0);
  for (int gy = 0; gy < grid_h; ++gy)
    for (int gx = 0; gx < grid_w; ++gx) {
      std::map<int, int> counts;
      int y1 = std::min((gy + 1) * stride, gt.h);
      int x1 = std::min((gx + 1) * stride, gt.w);
      for (int y = gy * stride; y < y1; ++y)
        for (int x = gx * stride; x < x1; ++x) counts[gt.id_at(y, x)]++;
      int best_id = 0, best_count = -1;
      for (const auto& [id, count] : counts) {
        if (count > best_count) {  // ties keep the smaller id (map order)
          best_count = count;
          best_id = id;
        }
      }
      cell_ids[static_cast<std::size_t>(gy) * grid_w + gx] = best_id;
    }

  std::vector<RasterTarget> targets;
  for (const SegmentRecord& seg : gt.segments) {
    RasterTarget t;
    t.segment_id = seg.segment_id;
    t.category_id = seg.category_id;
    t.mask = Tensor({1, static_cast<std::int64_t>(grid_h) * grid_w});
    std::int64_t area = 0;
    for (std::size_t i = 0; i < cell_ids.size(); ++i)
      if (cell_ids[i] == seg.segment_id) {
        t.mask[static_cast<std::int64_t>(i)] = 1.0;
        ++area;
      }
    if (area == 0) {
      std::cerr << "warning: target segment " << seg.segment_id << " of "
                << gt.image_id
                << " vanished at feature resolution; excluded from the loss\n";
      continue;
    }
    targets.push_back(std::move(t));
  }
  return targets;
}

void TrainConfig::validate() const {
  if (!(lambda_cls > 0 && lambda_pixel > 0 && lambda_dice > 0))
    throw ConfigError("train: loss weights must be positive");
  if (!(learning_rate > 0)) throw ConfigError("train: step size must be positive");
  if (weight_decay < 0) throw ConfigError("train: weight decay must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
  if (steps < 0 || epochs < 0) throw ConfigError("train: negative schedule");
  if (precision != "double")
    throw ConfigError("train: unsupported precision '" + precision +
                      "' (this build computes in double)");
}

namespace {

// -log softmax(scores)[row, col], stable, as a graph node.
Var ce_from_scores(const Var& scores, std::int64_t row, std::int64_t col) {
  Var picked_row = ad::gather_rows(scores, {row});
  Var lse = ad::logsumexp_rows(picked_row);
  Var target_score = ad::slice_cols(picked_row, col, 1);
  return ad::sub(lse, target_score);
}

Var dice_graph(const Var& probs_row, const Tensor& target_row) {
  Var t = ad::constant(target_row);
  Var inter = ad::sum_all(ad::mul(probs_row, t));
  Var ps = ad::sum_all(probs_row);
  Var ts = ad::sum_all(t);
  Var num = ad::add_scalar(ad::scale(inter, 2.0), 1.0);
  Var den = ad::add_scalar(ad::add(ps, ts), 1.0);
  return ad::add_scalar(ad::neg(ad::div(num, den)), 1.0);
}

}  // namespace

LossGraphResult compute_loss_graph(const std::vector<LayerPrediction>& layers,
                                   const std::vector<RasterTarget>& targets,
                                   const std::vector<int>& target_class_rows,
                                   const TrainConfig& cfg) {
  if (cfg.lambda_cls < 0 || cfg.lambda_pixel < 0 || cfg.lambda_dice < 0)
    throw ConfigError("compute_loss: negative loss weight");
  if (layers.empty()) throw ValidationError("compute_loss: no layers");
  if (targets.size() != target_class_rows.size())
    throw ValidationError("compute_loss: target class row count mismatch");
  const std::int64_t K = layers.back().class_scores->value.rows();
  const std::int64_t ncols = layers.back().class_scores->value.cols();
  const std::int64_t no_object_col = ncols - 1;
  const int T = static_cast<int>(targets.size());

  auto build_cost = [&](const LayerPrediction& layer) {
    Tensor cost({K, T});
    Tensor probs({K, ncols});
    {
      // softmax of the scores, value-side only
      const Tensor& s = layer.class_scores->value;
      for (std::int64_t i = 0; i < K; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < ncols; ++j) mx = std::max(mx, s(i, j));
        double denom = 0.0;
        for (std::int64_t j = 0; j < ncols; ++j) {
          probs(i, j) = std::exp(s(i, j) - mx);
          denom += probs(i, j);
        }
        for (std::int64_t j = 0; j < ncols; ++j) probs(i, j) /= denom;
      }
    }
    const Tensor& logits = layer.mask_logits->value;
    for (std::int64_t k = 0; k < K; ++k) {
      for (int t = 0; t < T; ++t) {
        double ce = -std::log(std::max(
            probs(k, target_class_rows[static_cast<std::size_t>(t)]),
            1e-300));
        Tensor logit_row({1, logits.cols()});
        Tensor prob_row({1, logits.cols()});
        for (std::int64_t p = 0; p < logits.cols(); ++p) {
          logit_row[p] = logits(k, p);
          double x = logits(k, p);
          prob_row[p] = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                               : std::exp(x) / (1.0 + std::exp(x));
        }
        double bce =
            pixel_bce_loss(logit_row, targets[static_cast<std::size_t>(t)].mask);
        double dce =
            dice_loss(prob_row, targets[static_cast<std::size_t>(t)].mask);
        cost(k, t) = cfg.lambda_cls * ce + cfg.lambda_pixel * bce +
                     cfg.lambda_dice * dce;
      }
    }
    return cost;
  };

  MatchResult final_match;
  if (T > 0) final_match = hungarian_match(build_cost(layers.back()));
  else
    for (std::int64_t k = 0; k < K; ++k)
      final_match.unmatched_queries.push_back(static_cast<int>(k));

  LossGraphResult result;
  Var total;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    bool supervised = cfg.aux_supervision || li + 1 == layers.size();
    if (!supervised) {
      result.breakdown.per_layer.push_back({});
      continue;
    }
    const LayerPrediction& layer = layers[li];
    MatchResult match = final_match;
    if (cfg.rematch_per_layer && T > 0 && li + 1 != layers.size())
      match = hungarian_match(build_cost(layer));

    // classification: matched queries toward their target class, unmatched
    // ones toward no-object with a small weight; averaged over all K queries
    Var cls_sum;
    bool have_cls = false;
    for (const auto& [q, t] : match.pairs) {
      Var ce = ce_from_scores(
          layer.class_scores, q,
          target_class_rows[static_cast<std::size_t>(t)]);
      cls_sum = have_cls ? ad::add(cls_sum, ce) : ce;
      have_cls = true;
    }
    for (int q : match.unmatched_queries) {
      Var ce = ad::scale(ce_from_scores(layer.class_scores, q, no_object_col),
                         cfg.no_object_weight);
      cls_sum = have_cls ? ad::add(cls_sum, ce) : ce;
      have_cls = true;
    }
    Var cls = ad::scale(cls_sum, 1.0 / static_cast<double>(K));

    // mask losses over matched pairs, averaged over the number of pairs
    Var pixel, dice;
    if (!match.pairs.empty()) {
      Var pixel_sum, dice_sum;
      bool first = true;
      for (const auto& [q, t] : match.pairs) {
        Var logit_row = ad::gather_rows(layer.mask_logits, {q});
        const Tensor& tgt = targets[static_cast<std::size_t>(t)].mask;
        Var b = ad::bce_with_logits_mean(logit_row, tgt);
        Var d = dice_graph(ad::sigmoid(logit_row), tgt);
        if (first) {
          pixel_sum = b;
          dice_sum = d;
          first = false;
        } else {
          pixel_sum = ad::add(pixel_sum, b);
          dice_sum = ad::add(dice_sum, d);
        }
      }
      double inv = 1.0 / static_cast<double>(match.pairs.size());
      pixel = ad::scale(pixel_sum, inv);
      dice = ad::scale(dice_sum, inv);
    } else {
      pixel = ad::constant(Tensor::scalar(0.0));
      dice = ad::constant(Tensor::scalar(0.0));
    }

    Var layer_total =
        ad::add(ad::add(ad::scale(cls, cfg.lambda_cls),
                        ad::scale(pixel, cfg.lambda_pixel)),
                ad::scale(dice, cfg.lambda_dice));
    total = total ? ad::add(total, layer_total) : layer_total;

    LossBreakdown::LayerTerms terms;
    terms.cls = cls->value[0];
    terms.pixel = pixel->value[0];
    terms.dice = dice->value[0];
    result.breakdown.per_layer.push_back(terms);
    result.breakdown.cls += terms.cls;
    result.breakdown.pixel += terms.pixel;
    result.breakdown.dice += terms.dice;
  }
  result.total = total;
  result.breakdown.total = cfg.lambda_cls * result.breakdown.cls +
                           cfg.lambda_pixel * result.breakdown.pixel +
                           cfg.lambda_dice * result.breakdown.dice;
  result.final_match = final_match;
  return result;
}

LossBreakdown compute_loss(
    const std::vector<std::pair<Tensor, Tensor>>& layer_probs_and_logits,
    const PanopticSegmentation& targets, int stride, int grid_h, int grid_w,
    const std::vector<int>& class_row_of_category, const TrainConfig& cfg) {
  std::vector<RasterTarget> raster =
      rasterize_targets(targets, stride, grid_h, grid_w);
  std::vector<int> class_rows;
  for (const RasterTarget& t : raster) {
    if (t.category_id < 0 ||
        t.category_id >= static_cast<int>(class_row_of_category.size()))
      throw ValidationError("compute_loss: target category outside the table");
    class_rows.push_back(
        class_row_of_category[static_cast<std::size_t>(t.category_id)]);
  }
  std::vector<LayerPrediction> layers;
  for (const auto& [probs, logits] : layer_probs_and_logits) {
    LayerPrediction lp;
    // log-probabilities act as scores: softmax(log p) == p
    Tensor scores(probs.shape());
    for (std::int64_t i = 0; i < probs.numel(); ++i)
      scores[i] = std::log(std::max(probs[i], 1e-300));
    lp.class_scores = ad::constant(std::move(scores));
    lp.mask_logits = ad::constant(logits);
    layers.push_back(std::move(lp));
  }
  return compute_loss_graph(layers, raster, class_rows, cfg).breakdown;
}

// ---------------------------------------------------------------------------
// checkpointing

namespace {
constexpr char kCheckpointMagic[8] = {'C', 'S', 'E', 'G', 'C', 'K', 'P', '1'};

json model_config_to_json(const ModelConfig& cfg) {
  return json{{"dim", cfg.dim},
              {"heads", cfg.heads},
              {"queries", cfg.queries},
              {"enhancer_layers", cfg.enhancer_layers},
              {"decoder_layers", cfg.decoder_layers},
              {"dsa_points", cfg.dsa_points},
              {"dsa_dense", cfg.dsa_dense},
              {"init_seed", cfg.init_seed},
              {"backbone_seed", cfg.backbone_seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.dim = j.at("dim").get<std::int64_t>();
  cfg.heads = j.at("heads").get<int>();
  cfg.queries = j.at("queries").get<int>();
  cfg.enhancer_layers = j.at("enhancer_layers").get<int>();
  cfg.decoder_layers = j.at("decoder_layers").get<int>();
  cfg.dsa_points = j.at("dsa_points").get<int>();
  cfg.dsa_dense = j.at("dsa_dense").get<bool>();
  cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
  cfg.backbone_seed = j.at("backbone_seed").get<std::uint64_t>();
  return cfg;
}

}  // namespace

void save_checkpoint(const std::string& path, const SegmentationModel& model,
                     std::uint64_t vocabulary_hash) {
  json header;
  header["schema_version"] = 1;
  header["model"] = model_config_to_json(model.cfg);
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(vocabulary_hash));
  header["vocabulary_hash"] = hex;
  json tensors = json::array();
  for (const auto& e : model.store.entries()) {
    tensors.push_back({{"name", e.name},
                       {"shape", e.var->value.shape()},
                       {"frozen", e.frozen}});
  }
  header["tensors"] = tensors;
  std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  std::uint64_t len = header_str.size();
  unsigned char len_le[8];
  for (int i = 0; i < 8; ++i)
    len_le[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(len_le), 8);
  out.write(header_str.data(),
            static_cast<std::streamsize>(header_str.size()));
  for (const auto& e : model.store.entries()) {
    const Tensor& t = e.var->value;
    static_assert(sizeof(double) == 8);
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * 8));
  }
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

namespace {

json read_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError("not a checkpoint file: " + path);
  unsigned char len_le[8];
  in.read(reinterpret_cast<char*>(len_le), 8);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i)
    len |= static_cast<std::uint64_t>(len_le[i]) << (8 * i);
  std::string header_str(len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint header: " + path);
  try {
    return json::parse(header_str);
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path + ": " + e.what());
  }
}

}  // namespace

std::pair<ModelConfig, std::uint64_t> read_checkpoint_header(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  json header = read_header(in, path);
  std::uint64_t hash =
      std::stoull(header.at("vocabulary_hash").get<std::string>(), nullptr, 16);
  return {model_config_from_json(header.at("model")), hash};
}

void load_checkpoint(const std::string& path, SegmentationModel& model,
                     std::optional<std::uint64_t> expect_vocab_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  json header = read_header(in, path);
  std::uint64_t hash =
      std::stoull(header.at("vocabulary_hash").get<std::string>(), nullptr, 16);
  if (expect_vocab_hash && hash != *expect_vocab_hash)
    throw ValidationError(
        "checkpoint vocabulary does not match the loaded dataset: " + path);
  const json& tensors = header.at("tensors");
  if (tensors.size() != model.store.size())
    throw ValidationError("checkpoint tensor count mismatch: " + path);
  for (std::size_t i = 0; i < model.store.size(); ++i) {
    const auto& e = model.store.entries()[i];
    const json& meta = tensors[i];
    if (meta.at("name").get<std::string>() != e.name)
      throw ValidationError("checkpoint tensor order mismatch at '" + e.name +
                            "': " + path);
    std::vector<std::int64_t> shape =
        meta.at("shape").get<std::vector<std::int64_t>>();
    if (shape != e.var->value.shape())
      throw ValidationError("checkpoint shape mismatch for '" + e.name +
                            "': " + path);
    in.read(reinterpret_cast<char*>(e.var->value.data()),
            static_cast<std::streamsize>(e.var->value.numel() * 8));
    if (!in) throw IoError("truncated checkpoint payload: " + path);
  }
}

// ---------------------------------------------------------------------------
// training loop

FitResult fit(SegmentationModel& model, const std::vector<Scene>& scenes,
              const Vocabulary& vocab, const CategoryEmbeddingTable& table,
              const ConceptProvider& provider, const TextEncoderSpec& encoder,
              const TrainConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  vocab.validate();
  if (scenes.empty()) throw ValidationError("fit: empty dataset");
  if (table.vectors.rows() != vocab.size())
    throw ValidationError("fit: table does not cover the vocabulary");

  model.set_backbone_frozen(cfg.freeze_backbone);
  fs::create_directories(out_dir);
  std::string log_path = (fs::path(out_dir) / "loss_log.csv").string();
  std::ofstream log(log_path);
  if (!log) throw IoError("cannot write loss log: " + log_path);
  log << "step,total,cls,pixel,dice\n";
  log.precision(17);

  // identity mapping: table rows are vocabulary category ids
  std::vector<int> class_rows(static_cast<std::size_t>(vocab.size()));
  for (int i = 0; i < vocab.size(); ++i)
    class_rows[static_cast<std::size_t>(i)] = i;

  // member categories per scene from the concept provider
  std::vector<std::vector<int>> members(scenes.size());
  std::vector<std::vector<RasterTarget>> raster(scenes.size());
  std::vector<std::vector<int>> raster_rows(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    ConceptSet cs = provider.provide(scenes[i].second.image_id);
    MappedConceptSet mapped = map_to_vocabulary(cs, vocab, table, encoder);
    members[i] = mapped.mapped_category_ids();
    if (members[i].empty()) {
      // fall back to the full vocabulary
      for (int c = 0; c < vocab.size(); ++c) members[i].push_back(c);
    }
  }

  nn::AdamW opt(cfg.learning_rate, cfg.weight_decay);
  Rng order_rng(splitmix64(cfg.seed ^ 0x5eedfeedULL));

  int total_steps = cfg.steps;
  if (total_steps <= 0) {
    int steps_per_epoch = static_cast<int>(
        (scenes.size() + cfg.batch_size - 1) / cfg.batch_size);
    total_steps = cfg.epochs * steps_per_epoch;
  }

  FitResult result;
  std::vector<std::size_t> order(scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();  // trigger shuffle on first use

  bool raster_ready = false;
  int stride = 0, grid_h = 0, grid_w = 0;

  for (int step = 0; step < total_steps; ++step) {
    std::vector<std::size_t> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }

    std::vector<const Image*> images;
    std::vector<std::vector<int>> batch_members;
    for (std::size_t idx : batch) {
      images.push_back(&scenes[idx].first);
      batch_members.push_back(members[idx]);
    }
    std::vector<SegmentationModel::ForwardOutputs> outs =
        model.forward_batch(images, batch_members, table);

    if (!raster_ready) {
      stride = outs[0].global.stride;
      grid_h = outs[0].global.h;
      grid_w = outs[0].global.w;
      for (std::size_t i = 0; i < scenes.size(); ++i) {
        raster[i] = rasterize_targets(scenes[i].second, stride, grid_h, grid_w);
        for (const RasterTarget& t : raster[i])
          raster_rows[i].push_back(
              class_rows[static_cast<std::size_t>(t.category_id)]);
      }
      raster_ready = true;
    }

    Var batch_total;
    LossBreakdown step_breakdown;
    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
      std::vector<LayerPrediction> layers;
      for (const auto& l : outs[bi].layers)
        layers.push_back({l.class_scores, l.mask_logits});
      LossGraphResult loss = compute_loss_graph(
          layers, raster[batch[bi]], raster_rows[batch[bi]], cfg);
      batch_total = batch_total ? ad::add(batch_total, loss.total) : loss.total;
      step_breakdown.total += loss.breakdown.total;
      step_breakdown.cls += loss.breakdown.cls;
      step_breakdown.pixel += loss.breakdown.pixel;
      step_breakdown.dice += loss.breakdown.dice;
    }
    double inv_b = 1.0 / static_cast<double>(batch.size());
    batch_total = ad::scale(batch_total, inv_b);
    step_breakdown.total *= inv_b;
    step_breakdown.cls *= inv_b;
    step_breakdown.pixel *= inv_b;
    step_breakdown.dice *= inv_b;

    auto check = [&](double v, const char* name) {
      if (!std::isfinite(v))
        throw NumericalError("training aborted at step " +
                             std::to_string(step) + ": non-finite " + name);
    };
    check(step_breakdown.cls, "classification loss");
    check(step_breakdown.pixel, "pixel loss");
    check(step_breakdown.dice, "dice loss");
    check(step_breakdown.total, "total loss");

    ad::backward(batch_total);
    opt.step(model.store);

    log << step << "," << step_breakdown.total << "," << step_breakdown.cls
        << "," << step_breakdown.pixel << "," << step_breakdown.dice << "\n";
    result.step_losses.push_back(step_breakdown);
  }
  log.flush();

  result.loss_log_path = log_path;
  result.checkpoint_path = (fs::path(out_dir) / "checkpoint.bin").string();
  save_checkpoint(result.checkpoint_path, model, vocab.hash());
  return result;
}

}  // namespace cseg
