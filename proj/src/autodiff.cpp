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

#include "conceptseg/autodiff.hpp"

#include <cmath>
#include <limits>
#include <unordered_set>

namespace cseg::ad {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluC = 0.044715;

Var make_node(Tensor value, std::vector<Var> parents,
              std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const Var& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw ValidationError(std::string(op) + ": shape mismatch");
}

}  // namespace

Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

Var param(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->is_param = true;
  return n;
}

void backward(const Var& root) {
  if (root->value.numel() != 1)
    throw ValidationError("backward: root must be a scalar");
  // Iterative post-order DFS; order is fixed by parent list order, so the
  // accumulation sequence (and therefore rounding) is reproducible.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (root->requires_grad) stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    n->ensure_grad();
    n->zero_grad();
  }
  if (order.empty()) return;
  root->grad.fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = a->value[i] + b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    for (int k = 0; k < 2; ++k) {
      Node& p = *n.parents[k];
      if (!p.requires_grad) continue;
      Tensor& g = p.ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = a->value[i] - b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = a->value[i] * b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = a->value[i] / b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] / bv[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i)
        g[i] -= n.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

Var scale(const Var& a, double c) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * c;
  return make_node(std::move(out), {a}, [c](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * c;
  });
}

Var add_scalar(const Var& a, double c) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] + c;
  return make_node(std::move(out), {a}, [](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var exp_(const Var& a) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(a->value[i]);
  Tensor saved = out;
  return make_node(std::move(out), {a}, [saved](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * saved[i];
  });
}

Var log_(const Var& a) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(a->value[i]);
  return make_node(std::move(out), {a}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] / av[i];
  });
}

Var sqrt_(const Var& a) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = std::sqrt(a->value[i]);
  Tensor saved = out;
  return make_node(std::move(out), {a}, [saved](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      g[i] += n.grad[i] * 0.5 / saved[i];
  });
}

Var sigmoid(const Var& a) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    double x = a->value[i];
    out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                    : std::exp(x) / (1.0 + std::exp(x));
  }
  Tensor saved = out;
  return make_node(std::move(out), {a}, [saved](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i)
      g[i] += n.grad[i] * saved[i] * (1.0 - saved[i]);
  });
}

Var gelu(const Var& a) {
  // tanh approximation; smooth everywhere, which keeps finite-difference
  // gradient checks clean.
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    double x = a->value[i];
    double t = std::tanh(kGeluK * (x + kGeluC * x * x * x));
    out[i] = 0.5 * x * (1.0 + t);
  }
  return make_node(std::move(out), {a}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      double x = av[i];
      double u = kGeluK * (x + kGeluC * x * x * x);
      double t = std::tanh(u);
      double du = kGeluK * (1.0 + 3.0 * kGeluC * x * x);
      double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
      g[i] += n.grad[i] * d;
    }
  });
}

Var rsqrt_eps(const Var& a, double eps) {
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = 1.0 / std::sqrt(a->value[i] + eps);
  Tensor saved = out;
  return make_node(std::move(out), {a}, [saved](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      double y = saved[i];
      g[i] += n.grad[i] * (-0.5 * y * y * y);
    }
  });
}

Var mul_by_scalar_var(const Var& a, const Var& s) {
  if (s->value.numel() != 1)
    throw ValidationError("mul_by_scalar_var: scalar must be 1x1");
  double sv = s->value[0];
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * sv;
  return make_node(std::move(out), {a, s}, [sv](Node& n) {
    const Tensor& av = n.parents[0]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * sv;
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      double acc = 0.0;
      for (std::int64_t i = 0; i < n.grad.numel(); ++i)
        acc += n.grad[i] * av[i];
      g[0] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra

Var matmul(const Var& a, const Var& b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 ||
      a->value.cols() != b->value.rows())
    throw ValidationError("matmul: incompatible shapes");
  std::int64_t n = a->value.rows(), k = a->value.cols(), m = b->value.cols();
  Tensor out({n, m});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t p = 0; p < k; ++p) {
      double av = a->value(i, p);
      if (av == 0.0) continue;
      for (std::int64_t j = 0; j < m; ++j) out(i, j) += av * b->value(p, j);
    }
  return make_node(std::move(out), {a, b}, [n, k, m](Node& nd) {
    const Tensor& av = nd.parents[0]->value;
    const Tensor& bv = nd.parents[1]->value;
    if (nd.parents[0]->requires_grad) {
      Tensor& ga = nd.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::int64_t j = 0; j < m; ++j) acc += nd.grad(i, j) * bv(p, j);
          ga(i, p) += acc;
        }
    }
    if (nd.parents[1]->requires_grad) {
      Tensor& gb = nd.parents[1]->ensure_grad();
      for (std::int64_t p = 0; p < k; ++p)
        for (std::int64_t j = 0; j < m; ++j) {
          double acc = 0.0;
          for (std::int64_t i = 0; i < n; ++i) acc += av(i, p) * nd.grad(i, j);
          gb(p, j) += acc;
        }
    }
  });
}

Var transpose(const Var& a) {
  if (a->value.ndim() != 2) throw ValidationError("transpose: 2-D only");
  std::int64_t n = a->value.rows(), m = a->value.cols();
  Tensor out({m, n});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < m; ++j) out(j, i) = a->value(i, j);
  return make_node(std::move(out), {a}, [n, m](Node& nd) {
    Tensor& g = nd.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < m; ++j) g(i, j) += nd.grad(j, i);
  });
}

// ---------------------------------------------------------------------------
// reductions / broadcasts

Var sum_all(const Var& a) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < a->value.numel(); ++i) acc += a->value[i];
  return make_node(Tensor::scalar(acc), {a}, [](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[0];
  });
}

Var mean_all(const Var& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a->value.numel()));
}

Var row_sum(const Var& a) {
  std::int64_t n = a->value.rows(), m = a->value.cols();
  Tensor out({n, 1});
  for (std::int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < m; ++j) acc += a->value(i, j);
    out(i, 0) = acc;
  }
  return make_node(std::move(out), {a}, [n, m](Node& nd) {
    Tensor& g = nd.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < m; ++j) g(i, j) += nd.grad(i, 0);
  });
}

Var row_mean(const Var& a) {
  return scale(row_sum(a), 1.0 / static_cast<double>(a->value.cols()));
}

namespace {

enum class ColOp { Add, Sub, Mul };

Var colvec_op(const Var& a, const Var& v, ColOp op) {
  std::int64_t n = a->value.rows(), m = a->value.cols();
  if (v->value.rows() != n || v->value.cols() != 1)
    throw ValidationError("colvec op: vector shape mismatch");
  Tensor out({n, m});
  for (std::int64_t i = 0; i < n; ++i) {
    double vi = v->value(i, 0);
    for (std::int64_t j = 0; j < m; ++j) {
      double x = a->value(i, j);
      out(i, j) = op == ColOp::Add ? x + vi : op == ColOp::Sub ? x - vi : x * vi;
    }
  }
  return make_node(std::move(out), {a, v}, [n, m, op](Node& nd) {
    const Tensor& av = nd.parents[0]->value;
    const Tensor& vv = nd.parents[1]->value;
    if (nd.parents[0]->requires_grad) {
      Tensor& g = nd.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        double vi = vv(i, 0);
        for (std::int64_t j = 0; j < m; ++j)
          g(i, j) += op == ColOp::Mul ? nd.grad(i, j) * vi : nd.grad(i, j);
      }
    }
    if (nd.parents[1]->requires_grad) {
      Tensor& g = nd.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < m; ++j) {
          double gij = nd.grad(i, j);
          acc += op == ColOp::Add ? gij
               : op == ColOp::Sub ? -gij
                                  : gij * av(i, j);
        }
        g(i, 0) += acc;
      }
    }
  });
}

}  // namespace

Var add_colvec(const Var& a, const Var& v) { return colvec_op(a, v, ColOp::Add); }
Var sub_colvec(const Var& a, const Var& v) { return colvec_op(a, v, ColOp::Sub); }
Var mul_colvec(const Var& a, const Var& v) { return colvec_op(a, v, ColOp::Mul); }

Var add_rowvec(const Var& a, const Var& r) {
  std::int64_t n = a->value.rows(), m = a->value.cols();
  if (r->value.rows() != 1 || r->value.cols() != m)
    throw ValidationError("add_rowvec: vector shape mismatch");
  Tensor out({n, m});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < m; ++j)
      out(i, j) = a->value(i, j) + r->value(0, j);
  return make_node(std::move(out), {a, r}, [n, m](Node& nd) {
    if (nd.parents[0]->requires_grad) {
      Tensor& g = nd.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
    }
    if (nd.parents[1]->requires_grad) {
      Tensor& g = nd.parents[1]->ensure_grad();
      for (std::int64_t j = 0; j < m; ++j) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) acc += nd.grad(i, j);
        g(0, j) += acc;
      }
    }
  });
}

Var mul_rowvec(const Var& a, const Var& r) {
  std::int64_t n = a->value.rows(), m = a->value.cols();
  if (r->value.rows() != 1 || r->value.cols() != m)
    throw ValidationError("mul_rowvec: vector shape mismatch");
  Tensor out({n, m});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < m; ++j)
      out(i, j) = a->value(i, j) * r->value(0, j);
  return make_node(std::move(out), {a, r}, [n, m](Node& nd) {
    const Tensor& av = nd.parents[0]->value;
    const Tensor& rv = nd.parents[1]->value;
    if (nd.parents[0]->requires_grad) {
      Tensor& g = nd.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < m; ++j)
          g(i, j) += nd.grad(i, j) * rv(0, j);
    }
    if (nd.parents[1]->requires_grad) {
      Tensor& g = nd.parents[1]->ensure_grad();
      for (std::int64_t j = 0; j < m; ++j) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) acc += nd.grad(i, j) * av(i, j);
        g(0, j) += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// softmax family

Var row_softmax(const Var& a) {
  std::int64_t n = a->value.rows(), m = a->value.cols();
  Tensor out({n, m});
  for (std::int64_t i = 0; i < n; ++i) {
    double mx = kNegInf;
    for (std::int64_t j = 0; j < m; ++j) mx = std::max(mx, a->value(i, j));
    if (mx == kNegInf)
      throw NumericalError("softmax: row " + std::to_string(i) +
                           " is fully masked");
    double denom = 0.0;
    for (std::int64_t j = 0; j < m; ++j) {
      double e = std::exp(a->value(i, j) - mx);
      out(i, j) = e;
      denom += e;
    }
    for (std::int64_t j = 0; j < m; ++j) out(i, j) /= denom;
  }
  Tensor saved = out;
  return make_node(std::move(out), {a}, [n, m, saved](Node& nd) {
    Tensor& g = nd.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::int64_t j = 0; j < m; ++j) dot += nd.grad(i, j) * saved(i, j);
      for (std::int64_t j = 0; j < m; ++j)
        g(i, j) += saved(i, j) * (nd.grad(i, j) - dot);
    }
  });
}

Var logsumexp_rows(const Var& a) {
  std::int64_t n = a->value.rows(), m = a->value.cols();
  Tensor out({n, 1});
  for (std::int64_t i = 0; i < n; ++i) {
    double mx = kNegInf;
    for (std::int64_t j = 0; j < m; ++j) mx = std::max(mx, a->value(i, j));
    if (mx == kNegInf)
      throw NumericalError("logsumexp: row is fully -inf");
    double acc = 0.0;
    for (std::int64_t j = 0; j < m; ++j) acc += std::exp(a->value(i, j) - mx);
    out(i, 0) = mx + std::log(acc);
  }
  Tensor saved = out;
  return make_node(std::move(out), {a}, [n, m, saved](Node& nd) {
    const Tensor& av = nd.parents[0]->value;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < m; ++j)
        g(i, j) += nd.grad(i, 0) * std::exp(av(i, j) - saved(i, 0));
  });
}

// ---------------------------------------------------------------------------
// shape ops

Var reshape(const Var& a, std::vector<std::int64_t> shape) {
  if (Tensor::numel_of(shape) != a->value.numel())
    throw ValidationError("reshape: element count mismatch");
  Tensor out = Tensor::from_data(std::move(shape), a->value.vec());
  return make_node(std::move(out), {a}, [](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

Var slice_cols(const Var& a, std::int64_t c0, std::int64_t len) {
  std::int64_t n = a->value.rows(), m = a->value.cols();
  if (c0 < 0 || len <= 0 || c0 + len > m)
    throw ValidationError("slice_cols: out of range");
  Tensor out({n, len});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < len; ++j) out(i, j) = a->value(i, c0 + j);
  return make_node(std::move(out), {a}, [n, len, c0](Node& nd) {
    Tensor& g = nd.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < len; ++j) g(i, c0 + j) += nd.grad(i, j);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_cols: empty");
  std::int64_t n = parts[0]->value.rows(), m = 0;
  for (const Var& p : parts) {
    if (p->value.rows() != n)
      throw ValidationError("concat_cols: row count mismatch");
    m += p->value.cols();
  }
  Tensor out({n, m});
  std::int64_t off = 0;
  for (const Var& p : parts) {
    std::int64_t pm = p->value.cols();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < pm; ++j) out(i, off + j) = p->value(i, j);
    off += pm;
  }
  return make_node(std::move(out), parts, [n](Node& nd) {
    std::int64_t off = 0;
    for (Var& p : nd.parents) {
      std::int64_t pm = p->value.cols();
      if (p->requires_grad) {
        Tensor& g = p->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < pm; ++j) g(i, j) += nd.grad(i, off + j);
      }
      off += pm;
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_rows: empty");
  std::int64_t m = parts[0]->value.cols(), n = 0;
  for (const Var& p : parts) {
    if (p->value.cols() != m)
      throw ValidationError("concat_rows: column count mismatch");
    n += p->value.rows();
  }
  Tensor out({n, m});
  std::int64_t off = 0;
  for (const Var& p : parts) {
    std::int64_t pn = p->value.rows();
    for (std::int64_t i = 0; i < pn; ++i)
      for (std::int64_t j = 0; j < m; ++j) out(off + i, j) = p->value(i, j);
    off += pn;
  }
  return make_node(std::move(out), parts, [m](Node& nd) {
    std::int64_t off = 0;
    for (Var& p : nd.parents) {
      std::int64_t pn = p->value.rows();
      if (p->requires_grad) {
        Tensor& g = p->ensure_grad();
        for (std::int64_t i = 0; i < pn; ++i)
          for (std::int64_t j = 0; j < m; ++j) g(i, j) += nd.grad(off + i, j);
      }
      off += pn;
    }
  });
}

Var gather_rows(const Var& a, std::vector<std::int64_t> idx) {
  std::int64_t n = a->value.rows(), m = a->value.cols();
  for (std::int64_t i : idx)
    if (i < 0 || i >= n) throw ValidationError("gather_rows: index out of range");
  Tensor out({static_cast<std::int64_t>(idx.size()), m});
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::int64_t j = 0; j < m; ++j)
      out(static_cast<std::int64_t>(r), j) = a->value(idx[r], j);
  return make_node(std::move(out), {a}, [idx, m](Node& nd) {
    Tensor& g = nd.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::int64_t j = 0; j < m; ++j)
        g(idx[r], j) += nd.grad(static_cast<std::int64_t>(r), j);
  });
}

Var scatter_add_rows(const Var& base, std::vector<std::int64_t> idx,
                     const Var& rows) {
  std::int64_t n = base->value.rows(), m = base->value.cols();
  if (rows->value.cols() != m ||
      rows->value.rows() != static_cast<std::int64_t>(idx.size()))
    throw ValidationError("scatter_add_rows: shape mismatch");
  for (std::int64_t i : idx)
    if (i < 0 || i >= n)
      throw ValidationError("scatter_add_rows: index out of range");
  Tensor out = base->value;
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::int64_t j = 0; j < m; ++j)
      out(idx[r], j) += rows->value(static_cast<std::int64_t>(r), j);
  return make_node(std::move(out), {base, rows}, [idx, m](Node& nd) {
    if (nd.parents[0]->requires_grad) {
      Tensor& g = nd.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
    }
    if (nd.parents[1]->requires_grad) {
      Tensor& g = nd.parents[1]->ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::int64_t j = 0; j < m; ++j)
          g(static_cast<std::int64_t>(r), j) += nd.grad(idx[r], j);
    }
  });
}

// ---------------------------------------------------------------------------
// spatial ops

Var bilinear_sample(const Var& values, std::int64_t h, std::int64_t w,
                    const Var& positions) {
  if (values->value.rows() != h * w)
    throw ValidationError("bilinear_sample: grid shape mismatch");
  if (positions->value.cols() != 2)
    throw ValidationError("bilinear_sample: positions must be n x 2");
  if (!positions->value.all_finite())
    throw NumericalError("bilinear_sample: non-finite sampling positions");
  std::int64_t c = values->value.cols();
  std::int64_t n = positions->value.rows();
  Tensor out({n, c});
  for (std::int64_t i = 0; i < n; ++i) {
    double y = positions->value(i, 0), x = positions->value(i, 1);
    double y0 = std::floor(y), x0 = std::floor(x);
    double fy = y - y0, fx = x - x0;
    const std::int64_t iy0 = static_cast<std::int64_t>(y0);
    const std::int64_t ix0 = static_cast<std::int64_t>(x0);
    const double ws[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx),
                          fy * fx};
    const std::int64_t ys[4] = {iy0, iy0, iy0 + 1, iy0 + 1};
    const std::int64_t xs[4] = {ix0, ix0 + 1, ix0, ix0 + 1};
    for (int corner = 0; corner < 4; ++corner) {
      std::int64_t yy = ys[corner], xx = xs[corner];
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;  // zero padding
      double wgt = ws[corner];
      for (std::int64_t ch = 0; ch < c; ++ch)
        out(i, ch) += wgt * values->value(yy * w + xx, ch);
    }
  }
  return make_node(std::move(out), {values, positions}, [h, w, c, n](Node& nd) {
    const Tensor& vv = nd.parents[0]->value;
    const Tensor& pv = nd.parents[1]->value;
    Tensor* gv = nd.parents[0]->requires_grad ? &nd.parents[0]->ensure_grad()
                                              : nullptr;
    Tensor* gp = nd.parents[1]->requires_grad ? &nd.parents[1]->ensure_grad()
                                              : nullptr;
    for (std::int64_t i = 0; i < n; ++i) {
      double y = pv(i, 0), x = pv(i, 1);
      double y0 = std::floor(y), x0 = std::floor(x);
      double fy = y - y0, fx = x - x0;
      const std::int64_t iy0 = static_cast<std::int64_t>(y0);
      const std::int64_t ix0 = static_cast<std::int64_t>(x0);
      // corner weights and their derivatives w.r.t. fy, fx
      const double ws[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx),
                            fy * fx};
      const double dwdy[4] = {-(1 - fx), -fx, (1 - fx), fx};
      const double dwdx[4] = {-(1 - fy), (1 - fy), -fy, fy};
      const std::int64_t ys[4] = {iy0, iy0, iy0 + 1, iy0 + 1};
      const std::int64_t xs[4] = {ix0, ix0 + 1, ix0, ix0 + 1};
      double acc_y = 0.0, acc_x = 0.0;
      for (int corner = 0; corner < 4; ++corner) {
        std::int64_t yy = ys[corner], xx = xs[corner];
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double go = nd.grad(i, ch);
          double val = vv(yy * w + xx, ch);
          if (gv) (*gv)(yy * w + xx, ch) += go * ws[corner];
          acc_y += go * dwdy[corner] * val;
          acc_x += go * dwdx[corner] * val;
        }
      }
      if (gp) {
        (*gp)(i, 0) += acc_y;
        (*gp)(i, 1) += acc_x;
      }
    }
  });
}

Var conv3x3(const Var& x, std::int64_t h, std::int64_t w, const Var& weight,
            const Var& bias) {
  std::int64_t cin = x->value.cols();
  if (x->value.rows() != h * w)
    throw ValidationError("conv3x3: grid shape mismatch");
  if (weight->value.cols() != cin * 9)
    throw ValidationError("conv3x3: weight shape mismatch");
  std::int64_t cout = weight->value.rows();
  if (bias->value.rows() != 1 || bias->value.cols() != cout)
    throw ValidationError("conv3x3: bias shape mismatch");
  Tensor out({h * w, cout});
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t xx = 0; xx < w; ++xx)
      for (std::int64_t co = 0; co < cout; ++co) {
        double acc = bias->value(0, co);
        for (std::int64_t ci = 0; ci < cin; ++ci)
          for (int ky = -1; ky <= 1; ++ky)
            for (int kx = -1; kx <= 1; ++kx) {
              std::int64_t sy = y + ky, sx = xx + kx;
              if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
              acc += x->value(sy * w + sx, ci) *
                     weight->value(co, ci * 9 + (ky + 1) * 3 + (kx + 1));
            }
        out(y * w + xx, co) = acc;
      }
  return make_node(std::move(out), {x, weight, bias},
                   [h, w, cin, cout](Node& nd) {
    const Tensor& xv = nd.parents[0]->value;
    const Tensor& wv = nd.parents[1]->value;
    Tensor* gx = nd.parents[0]->requires_grad ? &nd.parents[0]->ensure_grad()
                                              : nullptr;
    Tensor* gw = nd.parents[1]->requires_grad ? &nd.parents[1]->ensure_grad()
                                              : nullptr;
    Tensor* gb = nd.parents[2]->requires_grad ? &nd.parents[2]->ensure_grad()
                                              : nullptr;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t xx = 0; xx < w; ++xx)
        for (std::int64_t co = 0; co < cout; ++co) {
          double go = nd.grad(y * w + xx, co);
          if (go == 0.0) continue;
          if (gb) (*gb)(0, co) += go;
          for (std::int64_t ci = 0; ci < cin; ++ci)
            for (int ky = -1; ky <= 1; ++ky)
              for (int kx = -1; kx <= 1; ++kx) {
                std::int64_t sy = y + ky, sx = xx + kx;
                if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                std::int64_t widx = ci * 9 + (ky + 1) * 3 + (kx + 1);
                if (gx) (*gx)(sy * w + sx, ci) += go * wv(co, widx);
                if (gw) (*gw)(co, widx) += go * xv(sy * w + sx, ci);
              }
        }
  });
}

Var avg_pool2(const Var& x, std::int64_t h, std::int64_t w) {
  std::int64_t c = x->value.cols();
  if (x->value.rows() != h * w)
    throw ValidationError("avg_pool2: grid shape mismatch");
  std::int64_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  Tensor out({oh * ow, c});
  for (std::int64_t oy = 0; oy < oh; ++oy)
    for (std::int64_t ox = 0; ox < ow; ++ox) {
      std::int64_t y1 = std::min(2 * oy + 2, h), x1 = std::min(2 * ox + 2, w);
      double cnt = static_cast<double>((y1 - 2 * oy) * (x1 - 2 * ox));
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::int64_t y = 2 * oy; y < y1; ++y)
          for (std::int64_t xx = 2 * ox; xx < x1; ++xx)
            acc += x->value(y * w + xx, ch);
        out(oy * ow + ox, ch) = acc / cnt;
      }
    }
  return make_node(std::move(out), {x}, [h, w, c, oh, ow](Node& nd) {
    Tensor& g = nd.parents[0]->ensure_grad();
    for (std::int64_t oy = 0; oy < oh; ++oy)
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        std::int64_t y1 = std::min(2 * oy + 2, h), x1 = std::min(2 * ox + 2, w);
        double cnt = static_cast<double>((y1 - 2 * oy) * (x1 - 2 * ox));
        for (std::int64_t ch = 0; ch < c; ++ch) {
          double go = nd.grad(oy * ow + ox, ch) / cnt;
          for (std::int64_t y = 2 * oy; y < y1; ++y)
            for (std::int64_t xx = 2 * ox; xx < x1; ++xx)
              g(y * w + xx, ch) += go;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// losses

Var bce_with_logits_mean(const Var& logits, Tensor target) {
  if (!logits->value.same_shape(target))
    throw ValidationError("bce_with_logits: shape mismatch");
  std::int64_t n = logits->value.numel();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double x = logits->value[i], t = target[i];
    // max(x,0) - x*t + log(1 + exp(-|x|))
    acc += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  double inv_n = 1.0 / static_cast<double>(n);
  Tensor moved_target = std::move(target);
  return make_node(Tensor::scalar(acc * inv_n), {logits},
                   [t = std::move(moved_target), inv_n](Node& nd) {
    const Tensor& xv = nd.parents[0]->value;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      double x = xv[i];
      double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                        : std::exp(x) / (1.0 + std::exp(x));
      g[i] += nd.grad[0] * (s - t[i]) * inv_n;
    }
  });
}

}  // namespace cseg::ad
