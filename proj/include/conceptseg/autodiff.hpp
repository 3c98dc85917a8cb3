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

#include <functional>
#include <memory>
#include <vector>

#include "conceptseg/tensor.hpp"

namespace cseg::ad {

// Reverse-mode automatic differentiation over a dynamically built tape.
// Every forward pass builds a fresh DAG of Nodes; backward() walks it in
// reverse topological order. Single-threaded by design: reduction order is
// fixed, so repeated runs are bit-identical.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  bool is_param = false;
  std::vector<Var> parents;
  // Propagates this->grad into parents' grads.
  std::function<void(Node&)> backprop;

  Tensor& ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor(value.shape());
    return grad;
  }
  void zero_grad() {
    if (grad.numel()) grad.fill(0.0);
  }
};

Var constant(Tensor v);
Var param(Tensor v);

// Runs reverse-mode accumulation from a scalar (1x1) root. Zeroes the grads
// of all reachable nodes first.
void backward(const Var& root);

// -------- elementwise / arithmetic --------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);
Var exp_(const Var& a);
Var log_(const Var& a);
Var sqrt_(const Var& a);
Var sigmoid(const Var& a);
Var gelu(const Var& a);
// 1/sqrt(x + eps), elementwise.
Var rsqrt_eps(const Var& a, double eps);
// a * s where s is a 1x1 Var (broadcast scalar).
Var mul_by_scalar_var(const Var& a, const Var& s);

// -------- linear algebra (2-D) --------
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

// -------- reductions / broadcasts (2-D) --------
Var sum_all(const Var& a);   // -> 1x1
Var mean_all(const Var& a);  // -> 1x1
Var row_sum(const Var& a);   // n x m -> n x 1
Var row_mean(const Var& a);  // n x m -> n x 1
Var add_colvec(const Var& a, const Var& v);
Var sub_colvec(const Var& a, const Var& v);
Var mul_colvec(const Var& a, const Var& v);
Var add_rowvec(const Var& a, const Var& r);
Var mul_rowvec(const Var& a, const Var& r);

// Numerically stable softmax over rows. Entries equal to -inf receive
// exactly zero weight. A row whose entries are all -inf is an error.
Var row_softmax(const Var& a);
// log(sum(exp(row))) -> n x 1, stable.
Var logsumexp_rows(const Var& a);

// -------- shape ops --------
Var reshape(const Var& a, std::vector<std::int64_t> shape);
Var slice_cols(const Var& a, std::int64_t c0, std::int64_t n);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var gather_rows(const Var& a, std::vector<std::int64_t> idx);
// base with rows[j] added onto row idx[j]; idx entries must be unique.
Var scatter_add_rows(const Var& base, std::vector<std::int64_t> idx,
                     const Var& rows);

// -------- spatial ops --------
// values: (H*W) x C feature grid, positions: n x 2 rows of (y, x) in cell
// coordinates. Bilinear interpolation with zero padding outside the grid.
// Differentiable w.r.t. both values and positions.
Var bilinear_sample(const Var& values, std::int64_t h, std::int64_t w,
                    const Var& positions);
// x: (H*W) x Cin, weight: Cout x (Cin*9) with kernel layout ci*9 + ky*3 + kx,
// bias: 1 x Cout. Same-size zero-padded 3x3 convolution.
Var conv3x3(const Var& x, std::int64_t h, std::int64_t w, const Var& weight,
            const Var& bias);
// 2x2 average pooling with ceil semantics; border windows are clipped and
// divided by the number of covered cells.
Var avg_pool2(const Var& x, std::int64_t h, std::int64_t w);

// -------- losses --------
// Mean over elements of the numerically stable binary cross-entropy on
// logits against a constant {0,1} target.
Var bce_with_logits_mean(const Var& logits, Tensor target);

}  // namespace cseg::ad
