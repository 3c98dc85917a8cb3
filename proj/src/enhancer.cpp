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

#include "conceptseg/enhancer.hpp"

#include <algorithm>
#include <limits>
#include <set>

namespace cseg {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

void BatchConceptContext::validate() const {
  if (batch_categories.empty())
    throw ValidationError("batch context: no categories");
  if (!std::is_sorted(batch_categories.begin(), batch_categories.end()))
    throw ValidationError("batch context: categories must be ascending");
  if (embeddings.rows() != category_count())
    throw ValidationError("batch context: embedding row count mismatch");
  for (const auto& members : member_positions) {
    if (members.empty())
      throw ValidationError(
          "batch context: an image has an empty concept set; supply at least "
          "one concept or fall back to the full vocabulary");
    for (int p : members)
      if (p < 0 || p >= category_count())
        throw ValidationError("batch context: member position out of range");
    if (!std::is_sorted(members.begin(), members.end()))
      throw ValidationError("batch context: member positions must be ascending");
  }
}

BatchConceptContext make_batch_context(
    const std::vector<std::vector<int>>& member_category_ids,
    const CategoryEmbeddingTable& table,
    const std::vector<int>& extra_category_ids) {
  table.validate();
  std::set<int> ids(extra_category_ids.begin(), extra_category_ids.end());
  for (const auto& members : member_category_ids)
    ids.insert(members.begin(), members.end());
  BatchConceptContext ctx;
  ctx.batch_categories.assign(ids.begin(), ids.end());
  for (int id : ctx.batch_categories)
    if (id < 0 || id >= table.vectors.rows())
      throw ValidationError("batch context: category id " +
                            std::to_string(id) + " outside the table");
  ctx.embeddings = Tensor({ctx.category_count(), table.dim});
  for (int r = 0; r < ctx.category_count(); ++r)
    for (std::int64_t j = 0; j < table.dim; ++j)
      ctx.embeddings(r, j) =
          table.vectors(ctx.batch_categories[static_cast<std::size_t>(r)], j);
  for (const auto& members : member_category_ids) {
    std::vector<int> positions;
    for (int id : members) {
      auto it = std::lower_bound(ctx.batch_categories.begin(),
                                 ctx.batch_categories.end(), id);
      positions.push_back(
          static_cast<int>(it - ctx.batch_categories.begin()));
    }
    std::sort(positions.begin(), positions.end());
    positions.erase(std::unique(positions.begin(), positions.end()),
                    positions.end());
    ctx.member_positions.push_back(std::move(positions));
  }
  ctx.validate();
  return ctx;
}

void AttentionMaskMatrix::validate() const {
  for (std::int64_t i = 0; i < values.rows(); ++i) {
    bool any_open = false;
    for (std::int64_t j = 0; j < values.cols(); ++j) {
      double v = values(i, j);
      if (v == 0.0)
        any_open = true;
      else if (v != kNegInf)
        throw ValidationError("attention mask: entries must be 0 or -inf");
    }
    if (!any_open)
      throw ValidationError("attention mask: row " + std::to_string(i) +
                            " has no open entry");
  }
}

AttentionMaskMatrix build_attention_mask(const BatchConceptContext& context) {
  context.validate();
  AttentionMaskMatrix mask;
  mask.values =
      Tensor::full({context.batch_size(), context.category_count()}, kNegInf);
  for (int i = 0; i < context.batch_size(); ++i)
    for (int p : context.member_positions[static_cast<std::size_t>(i)])
      mask.values(i, p) = 0.0;
  mask.validate();
  return mask;
}

ad::Var masked_cross_attention(const ad::Var& queries,
                               const ad::Var& keys_values, const Tensor& mask,
                               const nn::Projections& params, int heads) {
  return nn::attention_core(queries, keys_values, &mask, params, heads);
}

GridVar deformable_self_attention(const GridVar& grid,
                                  const nn::DeformableBlock& params) {
  if (!grid.features->value.all_finite())
    throw NumericalError("deformable_self_attention: non-finite input grid");
  GridVar out = grid;
  if (params.dense) {
    out.features = nn::attention_core(grid.features, grid.features, nullptr,
                                      params.dense_proj, params.heads);
    return out;
  }
  out.features =
      nn::deformable_core(grid.features, grid.h, grid.w, params.value,
                          params.offset, params.weight, params.out,
                          params.heads, params.points);
  return out;
}

EnhancerParams EnhancerParams::create(nn::ParamStore& store, std::int64_t dim,
                                      const EnhancerConfig& cfg, Rng& rng) {
  if (cfg.layers < 1) throw ConfigError("enhancer: layers must be >= 1");
  if (cfg.heads < 1 || dim % cfg.heads != 0)
    throw ConfigError("enhancer: dim must be divisible by heads");
  if (cfg.dsa_points < 1) throw ConfigError("enhancer: dsa_points must be >= 1");
  std::int64_t hidden = cfg.ffn_hidden > 0 ? cfg.ffn_hidden : 2 * dim;
  EnhancerParams params;
  for (int l = 0; l < cfg.layers; ++l) {
    std::string p = "enhancer.layer" + std::to_string(l);
    EnhancerLayer layer;
    layer.text_to_image =
        nn::AttentionBlock::create(store, p + ".t2i", dim, cfg.heads, rng);
    layer.text_ffn = nn::Ffn::create(store, p + ".tf", dim, hidden, rng);
    layer.image_to_text =
        nn::AttentionBlock::create(store, p + ".i2t", dim, cfg.heads, rng);
    layer.image_ffn = nn::Ffn::create(store, p + ".if", dim, hidden, rng);
    layer.dsa = nn::DeformableBlock::create(store, p + ".dsa", dim, cfg.heads,
                                            cfg.dsa_points, cfg.dsa_dense, rng);
    params.layers.push_back(std::move(layer));
  }
  return params;
}

EnhancerResult cave_forward(const BatchConceptContext& context,
                            const std::vector<GridVar>& global_features,
                            const AttentionMaskMatrix& mask,
                            const EnhancerParams& params) {
  context.validate();
  mask.validate();
  const int batch = context.batch_size();
  const int m = context.category_count();
  if (static_cast<int>(global_features.size()) != batch)
    throw ValidationError("cave_forward: grid count does not match batch");
  if (mask.values.rows() != batch || mask.values.cols() != m)
    throw ValidationError("cave_forward: mask shape mismatch");
  for (int i = 0; i < batch; ++i)
    for (int j = 0; j < m; ++j) {
      bool member = std::binary_search(
          context.member_positions[static_cast<std::size_t>(i)].begin(),
          context.member_positions[static_cast<std::size_t>(i)].end(), j);
      bool open = mask.values(i, j) == 0.0;
      if (member != open)
        throw ValidationError("cave_forward: mask disagrees with memberships");
    }

  EnhancerResult result;
  // per-image evolving concept state, full m x dim
  std::vector<ad::Var> concept_states(static_cast<std::size_t>(batch));

  for (int i = 0; i < batch; ++i) {
    const GridVar& grid = global_features[static_cast<std::size_t>(i)];
    std::int64_t hw = static_cast<std::int64_t>(grid.h) * grid.w;
    if (grid.features->value.rows() != hw)
      throw ValidationError("cave_forward: grid feature shape mismatch");
    std::vector<std::int64_t> members(
        context.member_positions[static_cast<std::size_t>(i)].begin(),
        context.member_positions[static_cast<std::size_t>(i)].end());

    // broadcast of this image's mask row over all grid positions
    Tensor i2t_mask({hw, m});
    for (std::int64_t q = 0; q < hw; ++q)
      for (int j = 0; j < m; ++j) i2t_mask(q, j) = mask.values(i, j);

    ad::Var concepts = ad::constant(context.embeddings);
    ad::Var feats = grid.features;
    for (const EnhancerLayer& layer : params.layers) {
      // member concept rows query this image's features
      ad::Var q = ad::gather_rows(concepts, members);
      ad::Var upd = nn::attention_core(layer.text_to_image.ln(q), feats,
                                       nullptr, layer.text_to_image.proj,
                                       layer.text_to_image.heads);
      concepts = ad::scatter_add_rows(concepts, members, upd);
      concepts = layer.text_ffn(concepts);
      // features attend to concepts under the batch mask
      feats = layer.image_to_text(feats, concepts, &i2t_mask);
      feats = layer.image_ffn(feats);
      feats = layer.dsa(feats, grid.h, grid.w);
    }
    concept_states[static_cast<std::size_t>(i)] = concepts;
    GridVar out = grid;
    out.features = feats;
    result.enhanced.push_back(out);
  }

  // refined concepts: mean of per-image states over member images; rows of
  // categories grounded in no image are zero
  std::vector<ad::Var> refined_rows;
  refined_rows.reserve(static_cast<std::size_t>(m));
  for (int j = 0; j < m; ++j) {
    std::vector<int> owners;
    for (int i = 0; i < batch; ++i)
      if (mask.values(i, j) == 0.0) owners.push_back(i);
    if (owners.empty()) {
      refined_rows.push_back(ad::constant(Tensor({1, context.embeddings.cols()})));
      continue;
    }
    ad::Var acc;
    for (std::size_t oi = 0; oi < owners.size(); ++oi) {
      ad::Var row = ad::gather_rows(
          concept_states[static_cast<std::size_t>(owners[oi])], {j});
      acc = oi == 0 ? row : ad::add(acc, row);
    }
    refined_rows.push_back(
        ad::scale(acc, 1.0 / static_cast<double>(owners.size())));
  }
  result.refined_concepts = ad::concat_rows(refined_rows);
  return result;
}

}  // namespace cseg
