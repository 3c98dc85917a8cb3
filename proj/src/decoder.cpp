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

#include "conceptseg/decoder.hpp"

#include <cmath>

namespace cseg {

using ad::Var;

Var MaskQueryHead::operator()(const Var& queries) const {
  return l3(ad::gelu(l2(ad::gelu(l1(ln(queries))))));
}

DecoderParams DecoderParams::create(nn::ParamStore& store, std::int64_t dim,
                                    const DecoderConfig& cfg, Rng& rng) {
  if (cfg.layers < 1) throw ConfigError("decoder: layers must be >= 1");
  if (cfg.heads < 1 || dim % cfg.heads != 0)
    throw ConfigError("decoder: dim must be divisible by heads");
  std::int64_t hidden = cfg.ffn_hidden > 0 ? cfg.ffn_hidden : 2 * dim;
  DecoderParams params;
  for (int l = 0; l < cfg.layers; ++l) {
    std::string p = "decoder.layer" + std::to_string(l);
    DecoderLayer layer;
    layer.shared_cross =
        nn::AttentionBlock::create(store, p + ".sca", dim, cfg.heads, rng);
    layer.self_attn =
        nn::AttentionBlock::create(store, p + ".self", dim, cfg.heads, rng);
    layer.ffn = nn::Ffn::create(store, p + ".ffn", dim, hidden, rng);
    params.layers.push_back(std::move(layer));
  }
  params.mask_head.ln = nn::LayerNorm::create(store, "decoder.mask_head.ln", dim);
  params.mask_head.l1 =
      nn::Linear::create(store, "decoder.mask_head.l1", dim, dim, rng);
  params.mask_head.l2 =
      nn::Linear::create(store, "decoder.mask_head.l2", dim, dim, rng);
  params.mask_head.l3 =
      nn::Linear::create(store, "decoder.mask_head.l3", dim, dim, rng);
  return params;
}

std::vector<DecoderLayerOutput> decoder_forward(const Var& queries_init,
                                                const Var& concepts,
                                                const GridVar& enhanced,
                                                const DecoderParams& params) {
  if (concepts->value.rows() < 1)
    throw ValidationError(
        "decoder_forward: empty concept set; supply at least one member "
        "category");
  if (concepts->value.cols() != queries_init->value.cols())
    throw ValidationError("decoder_forward: concept/query dim mismatch");
  std::vector<DecoderLayerOutput> outputs;
  Var q = queries_init;
  for (const DecoderLayer& layer : params.layers) {
    q = layer.shared_cross(q, concepts);          // concept step
    q = layer.shared_cross(q, enhanced.features); // visual step, same weights
    q = layer.self_attn.self(q);
    q = layer.ffn(q);
    DecoderLayerOutput out;
    out.queries = q;
    out.mask_queries = params.mask_head(q);
    out.mask_logits = compute_masks(out.mask_queries, enhanced);
    outputs.push_back(std::move(out));
  }
  return outputs;
}

Var compute_masks(const Var& mask_queries, const GridVar& enhanced) {
  if (mask_queries->value.cols() != enhanced.features->value.cols())
    throw ValidationError("compute_masks: dim mismatch");
  return ad::matmul(mask_queries, ad::transpose(enhanced.features));
}

Var mask_pool(const Var& mask_logits, const GridVar& global_features,
              double eps) {
  std::int64_t hw =
      static_cast<std::int64_t>(global_features.h) * global_features.w;
  if (mask_logits->value.cols() != hw)
    throw ValidationError(
        "mask_pool: mask resolution does not match the feature grid");
  std::int64_t k = mask_logits->value.rows();
  Var w = ad::sigmoid(mask_logits);
  Var denom = ad::row_sum(w);

  std::vector<std::int64_t> healthy, degenerate;
  for (std::int64_t i = 0; i < k; ++i)
    (denom->value(i, 0) < eps ? degenerate : healthy).push_back(i);

  if (degenerate.empty()) {
    Var pooled = ad::matmul(w, global_features.features);
    Var inv = ad::div(ad::constant(Tensor::full({k, 1}, 1.0)), denom);
    return ad::mul_colvec(pooled, inv);
  }

  // degenerate rows fall back to the unweighted mean of the grid features
  Var mean_row = ad::scale(
      ad::matmul(ad::constant(Tensor::full({1, hw}, 1.0)),
                 global_features.features),
      1.0 / static_cast<double>(hw));
  std::vector<Var> parts;
  if (!healthy.empty()) {
    Var wh = ad::gather_rows(w, healthy);
    Var dh = ad::gather_rows(denom, healthy);
    Var pooled = ad::matmul(wh, global_features.features);
    Var inv = ad::div(
        ad::constant(Tensor::full({static_cast<std::int64_t>(healthy.size()), 1},
                                  1.0)),
        dh);
    parts.push_back(ad::mul_colvec(pooled, inv));
  }
  for (std::size_t i = 0; i < degenerate.size(); ++i) parts.push_back(mean_row);
  Var stacked = ad::concat_rows(parts);
  // restore original row order
  std::vector<std::int64_t> perm(static_cast<std::size_t>(k));
  std::int64_t pos = 0;
  for (std::int64_t row : healthy) perm[static_cast<std::size_t>(row)] = pos++;
  for (std::int64_t row : degenerate)
    perm[static_cast<std::size_t>(row)] = pos++;
  return ad::gather_rows(stacked, perm);
}

ClassifyOutput classify_graph(const Var& mask_embeddings,
                              const CategoryEmbeddingTable& table,
                              const Var& no_object,
                              const Var& log_temperature) {
  table.validate();
  if (mask_embeddings->value.cols() != table.dim)
    throw ValidationError("classify: embedding dim mismatch");
  Var em = nn::l2_normalize_rows(mask_embeddings);
  Var no_obj = nn::l2_normalize_rows(no_object);
  Var keys = ad::concat_rows({ad::constant(table.vectors), no_obj});
  Var cosine = ad::matmul(em, ad::transpose(keys));
  Var inv_temp = ad::exp_(ad::neg(log_temperature));
  ClassifyOutput out;
  out.scores = ad::mul_by_scalar_var(cosine, inv_temp);
  out.probs = ad::row_softmax(out.scores);
  return out;
}

Tensor classification_scores(const Tensor& mask_embeddings,
                             const CategoryEmbeddingTable& table,
                             const Tensor& no_object, double temperature) {
  if (!(temperature > 0))
    throw ValidationError("classify: temperature must be positive");
  table.validate();
  if (mask_embeddings.cols() != table.dim)
    throw ValidationError("classify: embedding dim mismatch");
  std::int64_t k = mask_embeddings.rows();
  std::int64_t n = table.vectors.rows();

  Tensor em = mask_embeddings;
  for (std::int64_t i = 0; i < k; ++i) {
    double norm = 0.0;
    for (std::int64_t j = 0; j < em.cols(); ++j) norm += em(i, j) * em(i, j);
    norm = std::sqrt(norm);
    if (norm < 1e-12)
      throw NumericalError("classify: zero-norm mask embedding in row " +
                           std::to_string(i));
    for (std::int64_t j = 0; j < em.cols(); ++j) em(i, j) /= norm;
  }
  Tensor noobj = no_object;
  {
    double norm = 0.0;
    for (std::int64_t j = 0; j < noobj.cols(); ++j)
      norm += noobj(0, j) * noobj(0, j);
    norm = std::sqrt(norm);
    if (norm < 1e-12)
      throw NumericalError("classify: zero-norm no-object embedding");
    for (std::int64_t j = 0; j < noobj.cols(); ++j) noobj(0, j) /= norm;
  }

  Tensor scores({k, n + 1});
  for (std::int64_t i = 0; i < k; ++i)
    for (std::int64_t c = 0; c <= n; ++c) {
      double dot = 0.0;
      for (std::int64_t j = 0; j < em.cols(); ++j)
        dot += em(i, j) * (c < n ? table.vectors(c, j) : noobj(0, j));
      scores(i, c) = dot / temperature;
    }
  return scores;
}

Tensor classify(const Tensor& mask_embeddings,
                const CategoryEmbeddingTable& table, const Tensor& no_object,
                double temperature) {
  Tensor scores =
      classification_scores(mask_embeddings, table, no_object, temperature);
  Tensor probs(scores.shape());
  for (std::int64_t i = 0; i < scores.rows(); ++i) {
    double mx = scores(i, 0);
    for (std::int64_t c = 1; c < scores.cols(); ++c)
      mx = std::max(mx, scores(i, c));
    double denom = 0.0;
    for (std::int64_t c = 0; c < scores.cols(); ++c) {
      probs(i, c) = std::exp(scores(i, c) - mx);
      denom += probs(i, c);
    }
    for (std::int64_t c = 0; c < scores.cols(); ++c) probs(i, c) /= denom;
  }
  return probs;
}

}  // namespace cseg
