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

#include "conceptseg/model.hpp"

#include <cmath>

namespace cseg {

void ModelConfig::validate() const {
  if (dim < 4 || dim % 2 != 0)
    throw ConfigError("model: dim must be even and >= 4");
  if (heads < 1 || dim % heads != 0)
    throw ConfigError("model: dim must be divisible by heads");
  if (queries < 1) throw ConfigError("model: queries must be >= 1");
  if (enhancer_layers < 1)
    throw ConfigError("model: enhancer_layers must be >= 1");
  if (decoder_layers < 1)
    throw ConfigError("model: decoder_layers must be >= 1");
  if (dsa_points < 1) throw ConfigError("model: dsa_points must be >= 1");
}

SegmentationModel SegmentationModel::create(const ModelConfig& cfg) {
  cfg.validate();
  SegmentationModel model;
  model.cfg = cfg;

  Rng backbone_rng(cfg.backbone_seed);
  model.backbone = Backbone::create(model.store, cfg.dim, backbone_rng);

  Rng rng(cfg.init_seed);
  EnhancerConfig ecfg;
  ecfg.layers = cfg.enhancer_layers;
  ecfg.heads = cfg.heads;
  ecfg.dsa_points = cfg.dsa_points;
  ecfg.dsa_dense = cfg.dsa_dense;
  model.enhancer = EnhancerParams::create(model.store, cfg.dim, ecfg, rng);

  DecoderConfig dcfg;
  dcfg.layers = cfg.decoder_layers;
  dcfg.heads = cfg.heads;
  model.decoder = DecoderParams::create(model.store, cfg.dim, dcfg, rng);

  Tensor queries({cfg.queries, cfg.dim});
  for (std::int64_t i = 0; i < queries.numel(); ++i)
    queries[i] = rng.normal() * 0.02;
  model.query_embed = model.store.add("queries.embed", std::move(queries));

  Tensor noobj({1, cfg.dim});
  for (std::int64_t i = 0; i < noobj.numel(); ++i)
    noobj[i] = rng.normal() * 0.02;
  model.no_object = model.store.add("classify.no_object", std::move(noobj));

  model.log_temperature = model.store.add(
      "classify.log_temperature", Tensor::scalar(std::log(0.07)));

  model.set_backbone_frozen(true);
  return model;
}

std::vector<SegmentationModel::ForwardOutputs> SegmentationModel::forward_batch(
    const std::vector<const Image*>& images,
    const std::vector<std::vector<int>>& member_ids,
    const CategoryEmbeddingTable& table) const {
  if (images.size() != member_ids.size())
    throw ValidationError("forward: image/member list size mismatch");
  if (table.dim != cfg.dim)
    throw ConfigError("forward: embedding table dim does not match model dim");

  BatchConceptContext ctx = make_batch_context(member_ids, table);
  AttentionMaskMatrix mask = build_attention_mask(ctx);

  std::vector<GridVar> grids;
  grids.reserve(images.size());
  for (const Image* img : images) grids.push_back(backbone.forward(*img));

  EnhancerResult enh = cave_forward(ctx, grids, mask, enhancer);

  std::vector<ForwardOutputs> outs;
  outs.reserve(images.size());
  ad::Var ctx_embeddings = ad::constant(ctx.embeddings);
  for (std::size_t i = 0; i < images.size(); ++i) {
    ForwardOutputs out;
    out.global = grids[i];
    out.enhanced = enh.enhanced[i];
    out.refined_concepts = enh.refined_concepts;
    std::vector<std::int64_t> positions(ctx.member_positions[i].begin(),
                                        ctx.member_positions[i].end());
    ad::Var concepts = ad::gather_rows(ctx_embeddings, positions);
    std::vector<DecoderLayerOutput> layers =
        decoder_forward(query_embed, concepts, out.enhanced, decoder);
    for (DecoderLayerOutput& l : layers) {
      LayerOutputs lo;
      lo.mask_queries = l.mask_queries;
      lo.mask_logits = l.mask_logits;
      ad::Var em = mask_pool(l.mask_logits, out.global);
      ClassifyOutput cls =
          classify_graph(em, table, no_object, log_temperature);
      lo.class_scores = cls.scores;
      lo.class_probs = cls.probs;
      out.layers.push_back(std::move(lo));
    }
    outs.push_back(std::move(out));
  }
  return outs;
}

SegmentationModel::ForwardOutputs SegmentationModel::forward_single(
    const Image& image, const std::vector<int>& member_ids,
    const CategoryEmbeddingTable& table) const {
  std::vector<const Image*> images = {&image};
  std::vector<std::vector<int>> members = {member_ids};
  return forward_batch(images, members, table)[0];
}

}  // namespace cseg
