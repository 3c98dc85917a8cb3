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

#include "conceptseg/nn.hpp"

#include <cmath>
#include <limits>

namespace cseg::nn {

using namespace cseg::ad;

Var ParamStore::add(const std::string& name, Tensor init, bool frozen) {
  if (index_.count(name))
    throw ValidationError("duplicate parameter name: " + name);
  Var v = param(std::move(init));
  if (frozen) v->requires_grad = false;
  index_[name] = entries_.size();
  entries_.push_back({name, v, frozen});
  return v;
}

Var ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw LookupError("unknown parameter: " + name);
  return entries_[it->second].var;
}

bool ParamStore::contains(const std::string& name) const {
  return index_.count(name) != 0;
}

void ParamStore::set_frozen(const std::string& prefix, bool frozen) {
  for (Entry& e : entries_) {
    if (e.name.rfind(prefix, 0) == 0) {
      e.frozen = frozen;
      e.var->requires_grad = !frozen;
    }
  }
}

void AdamW::step(ParamStore& store) {
  if (m_.empty()) {
    m_.resize(store.size());
    v_.resize(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      m_[i] = Tensor(store.entries()[i].var->value.shape());
      v_[i] = Tensor(store.entries()[i].var->value.shape());
    }
  }
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& e = store.entries()[i];
    if (e.frozen) continue;
    Tensor& p = e.var->value;
    Tensor& g = e.var->ensure_grad();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::int64_t j = 0; j < p.numel(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      p[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p[j]);
    }
  }
}

// ---------------------------------------------------------------------------

Linear Linear::create(ParamStore& store, const std::string& name,
                      std::int64_t in, std::int64_t out, Rng& rng,
                      double scale) {
  if (scale < 0) scale = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor w({in, out});
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal() * scale;
  Linear l;
  l.weight = store.add(name + ".w", std::move(w));
  l.bias = store.add(name + ".b", Tensor({1, out}));
  return l;
}

Linear Linear::fixed(Tensor w, Tensor b) {
  Linear l;
  l.weight = constant(std::move(w));
  l.bias = constant(std::move(b));
  return l;
}

Var Linear::operator()(const Var& x) const {
  return add_rowvec(matmul(x, weight), bias);
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& name,
                            std::int64_t d) {
  LayerNorm ln;
  ln.gamma = store.add(name + ".gamma", Tensor::full({1, d}, 1.0));
  ln.beta = store.add(name + ".beta", Tensor({1, d}));
  return ln;
}

Var LayerNorm::operator()(const Var& x) const {
  Var mu = row_mean(x);
  Var xc = sub_colvec(x, mu);
  Var var = row_mean(mul(xc, xc));
  Var inv = rsqrt_eps(var, eps);
  Var normed = mul_colvec(xc, inv);
  return add_rowvec(mul_rowvec(normed, gamma), beta);
}

Ffn Ffn::create(ParamStore& store, const std::string& name, std::int64_t d,
                std::int64_t hidden, Rng& rng) {
  Ffn f;
  f.ln = LayerNorm::create(store, name + ".ln", d);
  f.l1 = Linear::create(store, name + ".l1", d, hidden, rng);
  f.l2 = Linear::create(store, name + ".l2", hidden, d, rng);
  return f;
}

Var Ffn::operator()(const Var& x) const {
  return add(x, l2(gelu(l1(ln(x)))));
}

Projections Projections::create(ParamStore& store, const std::string& name,
                                std::int64_t d, Rng& rng) {
  Projections p;
  p.q = Linear::create(store, name + ".q", d, d, rng);
  p.k = Linear::create(store, name + ".k", d, d, rng);
  p.v = Linear::create(store, name + ".v", d, d, rng);
  p.o = Linear::create(store, name + ".o", d, d, rng);
  return p;
}

Var attention_core(const Var& queries, const Var& keys_values,
                   const Tensor* add_mask, const Projections& proj,
                   int heads) {
  std::int64_t d = queries->value.cols();
  std::int64_t nq = queries->value.rows();
  std::int64_t nk = keys_values->value.rows();
  if (keys_values->value.cols() != d)
    throw ValidationError("attention: query/key dim mismatch");
  if (heads < 1 || d % heads != 0)
    throw ValidationError("attention: dim not divisible by heads");
  if (add_mask) {
    if (add_mask->rows() != nq || add_mask->cols() != nk)
      throw ValidationError("attention: mask shape mismatch");
    constexpr double neg_inf = -std::numeric_limits<double>::infinity();
    for (std::int64_t i = 0; i < nq; ++i) {
      bool any_open = false;
      for (std::int64_t j = 0; j < nk; ++j) {
        double mv = (*add_mask)(i, j);
        if (mv == 0.0) {
          any_open = true;
        } else if (mv != neg_inf) {
          throw ValidationError("attention: mask entries must be 0 or -inf");
        }
      }
      if (!any_open)
        throw NumericalError("attention: query row " + std::to_string(i) +
                             " has every key masked");
    }
  }
  std::int64_t dh = d / heads;
  Var q = proj.q(queries);
  Var k = proj.k(keys_values);
  Var v = proj.v(keys_values);
  Var mask_var = add_mask ? constant(*add_mask) : nullptr;
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * dh, dh);
    Var kh = slice_cols(k, h * dh, dh);
    Var vh = slice_cols(v, h * dh, dh);
    Var scores = scale(matmul(qh, transpose(kh)),
                       1.0 / std::sqrt(static_cast<double>(dh)));
    if (mask_var) scores = add(scores, mask_var);
    Var attn = row_softmax(scores);
    outs.push_back(matmul(attn, vh));
  }
  Var merged = heads == 1 ? outs[0] : concat_cols(outs);
  return proj.o(merged);
}

Tensor attention_probs_head0(const Var& queries, const Var& keys_values,
                             const Tensor* add_mask, const Projections& proj,
                             int heads) {
  std::int64_t d = queries->value.cols();
  std::int64_t dh = d / heads;
  Var q = proj.q(queries);
  Var k = proj.k(keys_values);
  Var scores = scale(matmul(slice_cols(q, 0, dh), transpose(slice_cols(k, 0, dh))),
                     1.0 / std::sqrt(static_cast<double>(dh)));
  if (add_mask) scores = add(scores, constant(*add_mask));
  return row_softmax(scores)->value;
}

AttentionBlock AttentionBlock::create(ParamStore& store,
                                      const std::string& name, std::int64_t d,
                                      int heads, Rng& rng) {
  AttentionBlock b;
  b.ln = LayerNorm::create(store, name + ".ln", d);
  b.proj = Projections::create(store, name, d, rng);
  b.heads = heads;
  return b;
}

Var AttentionBlock::operator()(const Var& x, const Var& kv,
                               const Tensor* add_mask) const {
  return add(x, attention_core(ln(x), kv, add_mask, proj, heads));
}

Var AttentionBlock::self(const Var& x) const {
  Var normed = ln(x);
  return add(x, attention_core(normed, normed, nullptr, proj, heads));
}

DeformableBlock DeformableBlock::create(ParamStore& store,
                                        const std::string& name,
                                        std::int64_t d, int heads, int points,
                                        bool dense, Rng& rng) {
  DeformableBlock b;
  b.heads = heads;
  b.points = points;
  b.dense = dense;
  b.ln = LayerNorm::create(store, name + ".ln", d);
  if (dense) {
    b.dense_proj = Projections::create(store, name + ".dense", d, rng);
    return b;
  }
  b.value = Linear::create(store, name + ".value", d, d, rng);
  // Small offsets at init keep sampling near the source cell.
  b.offset = Linear::create(store, name + ".offset", d,
                            static_cast<std::int64_t>(heads) * points * 2, rng,
                            0.01);
  b.weight = Linear::create(store, name + ".weight", d,
                            static_cast<std::int64_t>(heads) * points, rng);
  b.out = Linear::create(store, name + ".out", d, d, rng);
  return b;
}

Var deformable_core(const Var& x, std::int64_t h, std::int64_t w,
                    const Linear& value, const Linear& offset,
                    const Linear& weight, const Linear& out, int heads,
                    int points) {
  std::int64_t d = x->value.cols();
  std::int64_t n = x->value.rows();
  if (n != h * w) throw ValidationError("deformable: grid shape mismatch");
  if (d % heads != 0)
    throw ValidationError("deformable: dim not divisible by heads");
  std::int64_t dh = d / heads;
  Var vals = value(x);
  Var offs = offset(x);   // n x (heads*points*2)
  Var wraw = weight(x);   // n x (heads*points)
  if (!offs->value.all_finite())
    throw NumericalError("deformable: non-finite predicted offsets");

  // Base cell coordinates as a constant n x 2 (y, x) matrix.
  Tensor base({n, 2});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t xx = 0; xx < w; ++xx) {
      base(y * w + xx, 0) = static_cast<double>(y);
      base(y * w + xx, 1) = static_cast<double>(xx);
    }
  Var base_var = constant(std::move(base));

  std::vector<Var> head_outs;
  head_outs.reserve(static_cast<std::size_t>(heads));
  for (int hd = 0; hd < heads; ++hd) {
    Var vh = slice_cols(vals, hd * dh, dh);
    Var wh = row_softmax(slice_cols(wraw, hd * points, points));
    Var acc;
    for (int p = 0; p < points; ++p) {
      std::int64_t off_col = (static_cast<std::int64_t>(hd) * points + p) * 2;
      Var delta = slice_cols(offs, off_col, 2);
      Var pos = add(base_var, delta);
      Var sampled = bilinear_sample(vh, h, w, pos);  // n x dh
      Var weighted = mul_colvec(sampled, slice_cols(wh, p, 1));
      acc = p == 0 ? weighted : add(acc, weighted);
    }
    head_outs.push_back(acc);
  }
  Var merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
  return out(merged);
}

Var DeformableBlock::operator()(const Var& x, std::int64_t h,
                                std::int64_t w) const {
  Var normed = ln(x);
  if (dense)
    return add(x, attention_core(normed, normed, nullptr, dense_proj, heads));
  return add(x, deformable_core(normed, h, w, value, offset, weight, out,
                                heads, points));
}

Var l2_normalize_rows(const Var& x, double min_norm) {
  Var sq = row_sum(mul(x, x));
  for (std::int64_t i = 0; i < sq->value.rows(); ++i) {
    if (std::sqrt(sq->value(i, 0)) < min_norm)
      throw NumericalError("l2_normalize_rows: row " + std::to_string(i) +
                           " has (near-)zero norm");
  }
  return mul_colvec(x, rsqrt_eps(sq, 0.0));
}

}  // namespace cseg::nn
