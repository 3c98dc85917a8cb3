// Independent reference implementations used as test oracles. Everything in
// this header is deliberately straight-line code kept apart from the library
// implementation paths it checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <vector>

#include "conceptseg/autodiff.hpp"
#include "conceptseg/tensor.hpp"

namespace oracle {

// ---------------------------------------------------------------------------
// Central finite-difference gradient check. Rebuilds the loss from scratch for
// every probe so the tape never goes stale.
struct GradCheckResult {
  double max_rel_err = 0.0;
  std::int64_t checked = 0;
  std::string worst;  // "param[i]" of the worst entry
};

inline GradCheckResult check_gradients(
    const std::function<cseg::ad::Var()>& build_loss,
    const std::vector<std::pair<std::string, cseg::ad::Var>>& params,
    double step = 1e-5, double zero_guard = 1e-6) {
  using cseg::ad::backward;
  cseg::ad::Var loss = build_loss();
  backward(loss);
  std::vector<cseg::Tensor> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, p] : params) analytic.push_back(p->ensure_grad());

  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    cseg::Tensor& value = params[pi].second->value;
    for (std::int64_t i = 0; i < value.numel(); ++i) {
      double keep = value[i];
      value[i] = keep + step;
      double up = build_loss()->value[0];
      value[i] = keep - step;
      double down = build_loss()->value[0];
      value[i] = keep;
      double fd = (up - down) / (2.0 * step);
      double an = analytic[pi][i];
      double denom = std::max(std::abs(fd), std::abs(an));
      double rel = denom < zero_guard ? 0.0 : std::abs(fd - an) / denom;
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = params[pi].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Single-head attention evaluated directly: softmax(q Wq (k Wk)^T / sqrt(d) +
// mask) (k Wv) Wo, written as plain loops.
inline cseg::Tensor single_head_attention(
    const cseg::Tensor& queries, const cseg::Tensor& keys,
    const cseg::Tensor& mask, const cseg::Tensor& wq, const cseg::Tensor& bq,
    const cseg::Tensor& wk, const cseg::Tensor& bk, const cseg::Tensor& wv,
    const cseg::Tensor& bv, const cseg::Tensor& wo, const cseg::Tensor& bo) {
  auto matmul_bias = [](const cseg::Tensor& x, const cseg::Tensor& w,
                        const cseg::Tensor& b) {
    cseg::Tensor y({x.rows(), w.cols()});
    for (std::int64_t i = 0; i < x.rows(); ++i)
      for (std::int64_t j = 0; j < w.cols(); ++j) {
        double acc = b(0, j);
        for (std::int64_t k = 0; k < x.cols(); ++k) acc += x(i, k) * w(k, j);
        y(i, j) = acc;
      }
    return y;
  };
  cseg::Tensor q = matmul_bias(queries, wq, bq);
  cseg::Tensor k = matmul_bias(keys, wk, bk);
  cseg::Tensor v = matmul_bias(keys, wv, bv);
  std::int64_t nq = q.rows(), nk = k.rows(), d = q.cols();
  cseg::Tensor attn({nq, nk});
  for (std::int64_t i = 0; i < nq; ++i) {
    std::vector<double> scores(static_cast<std::size_t>(nk));
    double mx = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < nk; ++j) {
      double s = 0.0;
      for (std::int64_t c = 0; c < d; ++c) s += q(i, c) * k(j, c);
      s = s / std::sqrt(static_cast<double>(d)) + mask(i, j);
      scores[static_cast<std::size_t>(j)] = s;
      mx = std::max(mx, s);
    }
    double denom = 0.0;
    for (std::int64_t j = 0; j < nk; ++j) {
      double e = std::exp(scores[static_cast<std::size_t>(j)] - mx);
      attn(i, j) = e;
      denom += e;
    }
    for (std::int64_t j = 0; j < nk; ++j) attn(i, j) /= denom;
  }
  cseg::Tensor mixed({nq, v.cols()});
  for (std::int64_t i = 0; i < nq; ++i)
    for (std::int64_t c = 0; c < v.cols(); ++c) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < nk; ++j) acc += attn(i, j) * v(j, c);
      mixed(i, c) = acc;
    }
  return matmul_bias(mixed, wo, bo);
}

// ---------------------------------------------------------------------------
// Reference bilinear interpolation with zero padding, one sample at a time.
inline std::vector<double> bilinear_at(const cseg::Tensor& grid,
                                       std::int64_t h, std::int64_t w,
                                       double y, double x) {
  std::int64_t c = grid.cols();
  std::vector<double> out(static_cast<std::size_t>(c), 0.0);
  double y0 = std::floor(y), x0 = std::floor(x);
  double fy = y - y0, fx = x - x0;
  struct Corner {
    std::int64_t yy, xx;
    double w;
  } corners[4] = {
      {static_cast<std::int64_t>(y0), static_cast<std::int64_t>(x0),
       (1 - fy) * (1 - fx)},
      {static_cast<std::int64_t>(y0), static_cast<std::int64_t>(x0) + 1,
       (1 - fy) * fx},
      {static_cast<std::int64_t>(y0) + 1, static_cast<std::int64_t>(x0),
       fy * (1 - fx)},
      {static_cast<std::int64_t>(y0) + 1, static_cast<std::int64_t>(x0) + 1,
       fy * fx},
  };
  for (const Corner& cr : corners) {
    if (cr.yy < 0 || cr.yy >= h || cr.xx < 0 || cr.xx >= w) continue;
    for (std::int64_t ch = 0; ch < c; ++ch)
      out[static_cast<std::size_t>(ch)] += cr.w * grid(cr.yy * w + cr.xx, ch);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss primitives recomputed from their definitions.
inline double dice_direct(const std::vector<double>& pred,
                          const std::vector<double>& target) {
  double inter = 0.0, ps = 0.0, ts = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * target[i];
    ps += pred[i];
    ts += target[i];
  }
  return 1.0 - (2.0 * inter + 1.0) / (ps + ts + 1.0);
}

inline double bce_direct(const std::vector<double>& logits,
                         const std::vector<double>& target) {
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    double x = logits[i], t = target[i];
    acc += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  return acc / static_cast<double>(logits.size());
}

// ---------------------------------------------------------------------------
// Exhaustive assignment search: minimum total cost over injective
// query->target maps covering min(K, T) pairs.
inline double exhaustive_min_assignment(
    const cseg::Tensor& cost, std::vector<std::pair<int, int>>* best_pairs) {
  int kq = static_cast<int>(cost.rows());
  int kt = static_cast<int>(cost.cols());
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::pair<int, int>> cur, arg;
  std::vector<bool> used_t(static_cast<std::size_t>(kt), false);
  int need = std::min(kq, kt);
  std::function<void(int, int, double)> rec = [&](int qi, int assigned,
                                                  double acc) {
    if (assigned == need) {
      if (acc < best) {
        best = acc;
        arg = cur;
      }
      return;
    }
    if (qi == kq) return;
    if (kq - qi < need - assigned) return;
    // skip this query
    rec(qi + 1, assigned, acc);
    for (int t = 0; t < kt; ++t) {
      if (used_t[static_cast<std::size_t>(t)]) continue;
      used_t[static_cast<std::size_t>(t)] = true;
      cur.emplace_back(qi, t);
      rec(qi + 1, assigned + 1, acc + cost(qi, t));
      cur.pop_back();
      used_t[static_cast<std::size_t>(t)] = false;
    }
  };
  rec(0, 0, 0.0);
  if (best_pairs) *best_pairs = arg;
  return best;
}

// ---------------------------------------------------------------------------
// Set-based panoptic quality computed from pixel sets.
struct PqCounts {
  double iou_sum = 0.0;
  int tp = 0, fp = 0, fn = 0;
};

// segments: list of (category, set of pixel indices). Unassigned pixels are
// simply absent from every set.
inline std::map<int, PqCounts> pq_bruteforce(
    const std::vector<std::pair<int, std::set<int>>>& pred,
    const std::vector<std::pair<int, std::set<int>>>& gt) {
  std::map<int, PqCounts> per_cat;
  std::vector<bool> pred_used(pred.size(), false), gt_used(gt.size(), false);
  for (std::size_t gi = 0; gi < gt.size(); ++gi) {
    for (std::size_t pi = 0; pi < pred.size(); ++pi) {
      if (pred[pi].first != gt[gi].first) continue;
      std::set<int> inter;
      std::set_intersection(pred[pi].second.begin(), pred[pi].second.end(),
                            gt[gi].second.begin(), gt[gi].second.end(),
                            std::inserter(inter, inter.begin()));
      std::set<int> uni;
      std::set_union(pred[pi].second.begin(), pred[pi].second.end(),
                     gt[gi].second.begin(), gt[gi].second.end(),
                     std::inserter(uni, uni.begin()));
      double iou = uni.empty() ? 0.0
                               : static_cast<double>(inter.size()) /
                                     static_cast<double>(uni.size());
      if (iou > 0.5) {
        per_cat[gt[gi].first].iou_sum += iou;
        per_cat[gt[gi].first].tp += 1;
        pred_used[pi] = true;
        gt_used[gi] = true;
      }
    }
  }
  for (std::size_t pi = 0; pi < pred.size(); ++pi)
    if (!pred_used[pi]) per_cat[pred[pi].first].fp += 1;
  for (std::size_t gi = 0; gi < gt.size(); ++gi)
    if (!gt_used[gi]) per_cat[gt[gi].first].fn += 1;
  return per_cat;
}

// Mean IoU over categories present in either map; pixels with gt == void
// (-1) are excluded.
inline double miou_bruteforce(const std::vector<int>& pred,
                              const std::vector<int>& gt,
                              std::map<int, double>* per_cat = nullptr) {
  std::set<int> cats;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] < 0) continue;
    cats.insert(gt[i]);
    if (pred[i] >= 0) cats.insert(pred[i]);
  }
  double total = 0.0;
  int n = 0;
  for (int c : cats) {
    std::int64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] < 0) continue;
      bool in_p = pred[i] == c, in_g = gt[i] == c;
      if (in_p && in_g) ++inter;
      if (in_p || in_g) ++uni;
    }
    if (uni == 0) continue;
    double iou = static_cast<double>(inter) / static_cast<double>(uni);
    if (per_cat) (*per_cat)[c] = iou;
    total += iou;
    ++n;
  }
  return n == 0 ? 0.0 : total / n;
}

}  // namespace oracle
