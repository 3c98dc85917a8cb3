#include <cmath>

#include "doctest.h"
#include "oracles.hpp"

#include "conceptseg/autodiff.hpp"
#include "conceptseg/common.hpp"
#include "conceptseg/tensor.hpp"

using namespace cseg;
using namespace cseg::ad;

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng,
                     double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3});
  CHECK(t.numel() == 6);
  t(1, 2) = 5.0;
  CHECK(t[5] == 5.0);
  CHECK(bitwise_equal(t, t));
  Tensor u = t;
  u(0, 0) = 1.0;
  CHECK(!bitwise_equal(t, u));
}

TEST_CASE("elementwise ops gradients match finite differences") {
  Rng rng(42);
  Var a = param(random_tensor({3, 4}, rng));
  Var b = param(random_tensor({3, 4}, rng));
  auto build = [&]() {
    Var x = add(mul(a, b), scale(sigmoid(a), 0.7));
    Var y = gelu(add_scalar(x, 0.1));
    Var z = mul(y, exp_(scale(b, 0.3)));
    return mean_all(z);
  };
  auto res = oracle::check_gradients(build, {{"a", a}, {"b", b}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("matmul / transpose / reductions gradients") {
  Rng rng(7);
  Var a = param(random_tensor({3, 5}, rng));
  Var b = param(random_tensor({5, 2}, rng));
  Var v = param(random_tensor({3, 1}, rng));
  Var r = param(random_tensor({1, 2}, rng));
  auto build = [&]() {
    Var y = matmul(a, b);
    y = add_colvec(y, v);
    y = mul_rowvec(y, r);
    Var z = matmul(transpose(y), y);
    return sum_all(row_mean(z));
  };
  auto res = oracle::check_gradients(build, {{"a", a}, {"b", b}, {"v", v}, {"r", r}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("softmax rows sum to one and gradients check out") {
  Rng rng(11);
  Var a = param(random_tensor({4, 6}, rng, 2.0));
  Var s = row_softmax(a);
  for (std::int64_t i = 0; i < 4; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < 6; ++j) acc += s->value(i, j);
    CHECK(acc == doctest::Approx(1.0).epsilon(1e-12));
  }
  Var w = constant(random_tensor({4, 6}, rng));
  auto build = [&]() { return mean_all(mul(row_softmax(a), w)); };
  auto res = oracle::check_gradients(build, {{"a", a}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("softmax with -inf entries gives exactly zero weight") {
  Tensor t({1, 3});
  t(0, 0) = 0.4;
  t(0, 1) = -std::numeric_limits<double>::infinity();
  t(0, 2) = 1.3;
  Var s = row_softmax(constant(t));
  CHECK(s->value(0, 1) == 0.0);
  CHECK(s->value(0, 0) + s->value(0, 2) == doctest::Approx(1.0).epsilon(1e-12));

  Tensor all_masked =
      Tensor::full({1, 2}, -std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(row_softmax(constant(all_masked)), NumericalError);
}

TEST_CASE("logsumexp matches log(sum(exp)) and is stable") {
  Rng rng(3);
  Var a = param(random_tensor({3, 4}, rng, 3.0));
  Var l = logsumexp_rows(a);
  for (std::int64_t i = 0; i < 3; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < 4; ++j) acc += std::exp(a->value(i, j));
    CHECK(l->value(i, 0) == doctest::Approx(std::log(acc)).epsilon(1e-12));
  }
  Var w = constant(random_tensor({3, 1}, rng));
  auto build = [&]() { return sum_all(mul(logsumexp_rows(a), w)); };
  auto res = oracle::check_gradients(build, {{"a", a}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("shape ops: slice, concat, gather, scatter") {
  Rng rng(5);
  Var a = param(random_tensor({4, 6}, rng));
  Var rows = param(random_tensor({2, 6}, rng));
  Var w = constant(random_tensor({4, 6}, rng));
  auto build = [&]() {
    Var left = slice_cols(a, 0, 3);
    Var right = slice_cols(a, 3, 3);
    Var joined = concat_cols({right, left});
    Var g = gather_rows(joined, {2, 0, 3});
    Var back = concat_rows({g, gather_rows(joined, {1})});
    Var scat = scatter_add_rows(back, {1, 3}, rows);
    return mean_all(mul(scat, w));
  };
  auto res = oracle::check_gradients(build, {{"a", a}, {"rows", rows}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("bilinear sampling equals reference interpolation") {
  Rng rng(17);
  const std::int64_t h = 4, w = 4, c = 8;
  Tensor grid = random_tensor({h * w, c}, rng);
  Tensor pos({5, 2});
  // mix of interior, exact-integer and out-of-range positions
  double coords[5][2] = {
      {1.25, 2.6}, {2.0, 1.0}, {0.0, 3.9}, {-0.4, 1.5}, {3.7, 3.7}};
  for (int i = 0; i < 5; ++i) {
    pos(i, 0) = coords[i][0];
    pos(i, 1) = coords[i][1];
  }
  Var out = bilinear_sample(constant(grid), h, w, constant(pos));
  for (int i = 0; i < 5; ++i) {
    auto ref = oracle::bilinear_at(grid, h, w, coords[i][0], coords[i][1]);
    for (std::int64_t ch = 0; ch < c; ++ch)
      CHECK(out->value(i, ch) ==
            doctest::Approx(ref[static_cast<std::size_t>(ch)]).epsilon(1e-12));
  }
  // exact integer position degenerates to the grid value
  for (std::int64_t ch = 0; ch < c; ++ch)
    CHECK(out->value(1, ch) == grid(2 * w + 1, ch));
}

TEST_CASE("bilinear sampling gradients (values and positions)") {
  Rng rng(19);
  const std::int64_t h = 3, w = 5, c = 4;
  Var grid = param(random_tensor({h * w, c}, rng));
  Tensor pos_init({6, 2});
  for (int i = 0; i < 6; ++i) {
    // keep probes away from integer grid lines: the interpolant is only
    // piecewise smooth there
    pos_init(i, 0) = rng.uniform(0.3, static_cast<double>(h) - 1.3);
    pos_init(i, 1) = rng.uniform(0.3, static_cast<double>(w) - 1.3);
  }
  Var pos = param(pos_init);
  Var w_out = constant(random_tensor({6, c}, rng));
  auto build = [&]() {
    return mean_all(mul(bilinear_sample(grid, h, w, pos), w_out));
  };
  auto res = oracle::check_gradients(build, {{"grid", grid}, {"pos", pos}});
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("conv3x3 and avg_pool2 gradients") {
  Rng rng(23);
  const std::int64_t h = 5, w = 4, cin = 3, cout = 2;
  Var x = param(random_tensor({h * w, cin}, rng));
  Var wt = param(random_tensor({cout, cin * 9}, rng, 0.3));
  Var b = param(random_tensor({1, cout}, rng, 0.1));
  Var mixw = constant(random_tensor({((h + 1) / 2) * ((w + 1) / 2), cout}, rng));
  auto build = [&]() {
    Var y = conv3x3(x, h, w, wt, b);
    Var p = avg_pool2(y, h, w);
    return mean_all(mul(p, mixw));
  };
  auto res = oracle::check_gradients(build, {{"x", x}, {"w", wt}, {"b", b}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("avg_pool2 ceil semantics") {
  // 5x3 grid pools to 3x2 with clipped border windows
  const std::int64_t h = 5, w = 3;
  Tensor x({h * w, 1});
  for (std::int64_t i = 0; i < h * w; ++i) x[i] = static_cast<double>(i);
  Var p = avg_pool2(constant(x), h, w);
  CHECK(p->value.rows() == 3 * 2);
  // top-left window: cells (0,0),(0,1),(1,0),(1,1) -> (0+1+3+4)/4
  CHECK(p->value(0, 0) == doctest::Approx((0 + 1 + 3 + 4) / 4.0));
  // right column windows cover a single column
  CHECK(p->value(1, 0) == doctest::Approx((2 + 5) / 2.0));
  // bottom-right corner is a single cell
  CHECK(p->value(5, 0) == doctest::Approx(14.0));
}

TEST_CASE("bce_with_logits matches direct evaluation and saturates") {
  Rng rng(29);
  Tensor logits = random_tensor({2, 6}, rng, 3.0);
  Tensor target({2, 6});
  for (std::int64_t i = 0; i < target.numel(); ++i)
    target[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
  Var l = bce_with_logits_mean(constant(logits), target);
  std::vector<double> lv(logits.vec()), tv(target.vec());
  CHECK(l->value[0] == doctest::Approx(oracle::bce_direct(lv, tv)).epsilon(1e-12));

  // logit 0 -> ln 2 per element regardless of target
  Tensor zeros({1, 4});
  Tensor tgt({1, 4});
  tgt[0] = 1;
  tgt[2] = 1;
  Var lz = bce_with_logits_mean(constant(zeros), tgt);
  CHECK(lz->value[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // saturated logits on the right side -> tiny loss
  Tensor sat({1, 2});
  sat[0] = 100.0;
  sat[1] = -100.0;
  Tensor stgt({1, 2});
  stgt[0] = 1.0;
  Var ls = bce_with_logits_mean(constant(sat), stgt);
  CHECK(ls->value[0] < 1e-6);

  Var a = param(random_tensor({2, 5}, rng));
  Tensor t2({2, 5});
  for (std::int64_t i = 0; i < t2.numel(); ++i)
    t2[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
  auto build = [&]() { return bce_with_logits_mean(a, t2); };
  auto res = oracle::check_gradients(build, {{"a", a}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("grad accumulates when a node is used twice") {
  Var a = param(Tensor::scalar(3.0));
  Var y = add(mul(a, a), scale(a, 2.0));  // a^2 + 2a, dy/da = 2a + 2 = 8
  backward(y);
  CHECK(a->grad[0] == doctest::Approx(8.0));
}

TEST_CASE("rng determinism") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(124);
  bool differs = false;
  Rng a2(123);
  for (int i = 0; i < 10; ++i) differs |= (a2.next_u64() != c.next_u64());
  CHECK(differs);
}
