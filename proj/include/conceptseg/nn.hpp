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
#include <string>
#include <vector>

#include "conceptseg/autodiff.hpp"
#include "conceptseg/common.hpp"

namespace cseg::nn {

using ad::Var;

// Named registry of trainable tensors. Registration order is the canonical
// iteration order for the optimizer and the checkpoint payload.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init, bool frozen = false);
  Var find(const std::string& name) const;
  bool contains(const std::string& name) const;
  void set_frozen(const std::string& prefix, bool frozen);

  struct Entry {
    std::string name;
    Var var;
    bool frozen;
  };
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Adaptive-moment optimizer with decoupled weight decay.
class AdamW {
 public:
  AdamW(double lr, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Applies one update from the grads currently stored on the params.
  // Frozen entries are not touched.
  void step(ParamStore& store);

 private:
  double lr_, wd_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// ---------------------------------------------------------------------------
// layers

struct Linear {
  Var weight;  // in x out
  Var bias;    // 1 x out
  static Linear create(ParamStore& store, const std::string& name,
                       std::int64_t in, std::int64_t out, Rng& rng,
                       double scale = -1.0);
  // Create with explicit constant weights (identity/zero wiring in tests).
  static Linear fixed(Tensor w, Tensor b);
  Var operator()(const Var& x) const;
};

struct LayerNorm {
  Var gamma;  // 1 x d
  Var beta;   // 1 x d
  double eps = 1e-5;
  static LayerNorm create(ParamStore& store, const std::string& name,
                          std::int64_t d);
  Var operator()(const Var& x) const;
};

// Pre-norm residual FFN: x + W2(gelu(W1(LN(x)))).
struct Ffn {
  LayerNorm ln;
  Linear l1, l2;
  static Ffn create(ParamStore& store, const std::string& name, std::int64_t d,
                    std::int64_t hidden, Rng& rng);
  Var operator()(const Var& x) const;
};

// One projection set for multi-head attention.
struct Projections {
  Linear q, k, v, o;
  static Projections create(ParamStore& store, const std::string& name,
                            std::int64_t d, Rng& rng);
};

// Raw multi-head scaled dot-product attention. `add_mask` (n_q x n_k) is
// applied additively before the softmax in every head; entries must be 0 or
// -inf and each query row must keep at least one unmasked key (checked
// before the softmax). Pass nullptr for unmasked attention.
Var attention_core(const Var& queries, const Var& keys_values,
                   const Tensor* add_mask, const Projections& proj, int heads);

// Attention probabilities of head 0 (n_q x n_k), for diagnostics and tests.
Tensor attention_probs_head0(const Var& queries, const Var& keys_values,
                             const Tensor* add_mask, const Projections& proj,
                             int heads);

// Pre-norm residual cross-attention block: x + Attn(LN(x), kv).
struct AttentionBlock {
  LayerNorm ln;
  Projections proj;
  int heads = 1;
  static AttentionBlock create(ParamStore& store, const std::string& name,
                               std::int64_t d, int heads, Rng& rng);
  Var operator()(const Var& x, const Var& kv,
                 const Tensor* add_mask = nullptr) const;
  // Self-attention: keys/values are the normalized queries.
  Var self(const Var& x) const;
};

// Learned-offset sampled attention over a feature grid. For every position
// each head predicts `points` offsets and softmax-normalized weights from the
// query feature, samples the value projection bilinearly (zero padding) and
// mixes through the output projection.
struct DeformableBlock {
  LayerNorm ln;
  Linear value;       // d -> d
  Linear offset;      // d -> heads*points*2
  Linear weight;      // d -> heads*points
  Linear out;         // d -> d
  int heads = 1;
  int points = 1;
  bool dense = false;  // fallback: ordinary self-attention over the grid
  Projections dense_proj;
  static DeformableBlock create(ParamStore& store, const std::string& name,
                                std::int64_t d, int heads, int points,
                                bool dense, Rng& rng);
  // Residual: x + DSA(LN(x)).
  Var operator()(const Var& x, std::int64_t h, std::int64_t w) const;
};

// Raw deformable attention (no norm, no residual); used by the block and
// exposed for the interpolation oracle tests.
Var deformable_core(const Var& x, std::int64_t h, std::int64_t w,
                    const Linear& value, const Linear& offset,
                    const Linear& weight, const Linear& out, int heads,
                    int points);

// L2-normalizes rows; throws NumericalError when a row norm is below
// `min_norm`.
Var l2_normalize_rows(const Var& x, double min_norm = 1e-12);

}  // namespace cseg::nn
