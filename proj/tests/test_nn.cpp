#include <cmath>

#include "doctest.h"
#include "oracles.hpp"

#include "conceptseg/nn.hpp"

using namespace cseg;
using namespace cseg::ad;
using namespace cseg::nn;

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng,
                     double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

Tensor identity(std::int64_t n) {
  Tensor t({n, n});
  for (std::int64_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Projections identity_projections(std::int64_t d) {
  Projections p;
  p.q = Linear::fixed(identity(d), Tensor({1, d}));
  p.k = Linear::fixed(identity(d), Tensor({1, d}));
  p.v = Linear::fixed(identity(d), Tensor({1, d}));
  p.o = Linear::fixed(identity(d), Tensor({1, d}));
  return p;
}

}  // namespace

TEST_CASE("layer norm normalizes rows and backprops") {
  Rng rng(31);
  ParamStore store;
  LayerNorm ln = LayerNorm::create(store, "ln", 6);
  Var x = param(random_tensor({3, 6}, rng, 2.0));
  Var y = ln(x);
  for (std::int64_t i = 0; i < 3; ++i) {
    double mean = 0.0;
    for (std::int64_t j = 0; j < 6; ++j) mean += y->value(i, j);
    mean /= 6.0;
    CHECK(std::abs(mean) < 1e-9);
  }
  Var w = constant(random_tensor({3, 6}, rng));
  auto build = [&]() { return mean_all(mul(ln(x), w)); };
  auto res = oracle::check_gradients(
      build, {{"x", x}, {"gamma", ln.gamma}, {"beta", ln.beta}});
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("masked attention: -inf key receives exactly zero weight") {
  const std::int64_t d = 3;
  Projections p = identity_projections(d);
  Tensor q({1, d});
  q(0, 0) = 0.3;
  q(0, 1) = -0.8;
  q(0, 2) = 0.1;
  Tensor kv({2, d});
  kv(0, 0) = 1.0;
  kv(0, 1) = 2.0;
  kv(0, 2) = -1.0;
  kv(1, 0) = 5.0;
  kv(1, 1) = -3.0;
  kv(1, 2) = 0.5;
  Tensor mask({1, 2});
  mask(0, 1) = -std::numeric_limits<double>::infinity();
  Var out = attention_core(constant(q), constant(kv), &mask, p, 1);
  // only key 0 is visible, so the output equals its value projection exactly
  for (std::int64_t c = 0; c < d; ++c) CHECK(out->value(0, c) == kv(0, c));
}

TEST_CASE("unmasked singleton key: output equals the value row") {
  const std::int64_t d = 4;
  Projections p = identity_projections(d);
  Rng rng(37);
  Tensor q = random_tensor({3, d}, rng);
  Tensor kv = random_tensor({1, d}, rng);
  Tensor mask({3, 1});  // all zeros
  Var out = attention_core(constant(q), constant(kv), &mask, p, 1);
  for (std::int64_t i = 0; i < 3; ++i)
    for (std::int64_t c = 0; c < d; ++c) CHECK(out->value(i, c) == kv(0, c));
}

TEST_CASE("attention matches the single-head brute-force oracle") {
  Rng rng(41);
  const std::int64_t d = 4;
  ParamStore store;
  Projections p = Projections::create(store, "attn", d, rng);
  Tensor q = random_tensor({3, d}, rng);
  Tensor kv = random_tensor({4, d}, rng);
  Tensor mask({3, 4});
  mask(0, 2) = -std::numeric_limits<double>::infinity();
  mask(2, 0) = -std::numeric_limits<double>::infinity();
  mask(2, 3) = -std::numeric_limits<double>::infinity();
  Var out = attention_core(constant(q), constant(kv), &mask, p, 1);
  Tensor ref = oracle::single_head_attention(
      q, kv, mask, p.q.weight->value, p.q.bias->value, p.k.weight->value,
      p.k.bias->value, p.v.weight->value, p.v.bias->value, p.o.weight->value,
      p.o.bias->value);
  for (std::int64_t i = 0; i < out->value.numel(); ++i)
    CHECK(out->value[i] == doctest::Approx(ref[i]).epsilon(1e-10));
}

TEST_CASE("attention rejects a fully masked query row before the softmax") {
  const std::int64_t d = 2;
  Projections p = identity_projections(d);
  Tensor q({1, d});
  Tensor kv({2, d});
  Tensor mask = Tensor::full({1, 2}, -std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(attention_core(constant(q), constant(kv), &mask, p, 1),
                  NumericalError);
  Tensor bad({1, 2});
  bad(0, 0) = 0.5;  // not in {0, -inf}
  CHECK_THROWS_AS(attention_core(constant(q), constant(kv), &bad, p, 1),
                  ValidationError);
}

TEST_CASE("multi-head attention gradients") {
  Rng rng(43);
  const std::int64_t d = 8;
  ParamStore store;
  Projections p = Projections::create(store, "attn", d, rng);
  Var q = param(random_tensor({3, d}, rng));
  Var kv = param(random_tensor({5, d}, rng));
  Tensor mask({3, 5});
  mask(1, 4) = -std::numeric_limits<double>::infinity();
  Var wmix = constant(random_tensor({3, d}, rng));
  auto build = [&]() {
    return mean_all(mul(attention_core(q, kv, &mask, p, 2), wmix));
  };
  std::vector<std::pair<std::string, Var>> params = {{"q", q}, {"kv", kv}};
  for (const auto& e : store.entries()) params.emplace_back(e.name, e.var);
  auto res = oracle::check_gradients(build, params);
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("deformable core: zero offsets with identity wiring is identity") {
  const std::int64_t d = 3, h = 3, w = 3;
  Rng rng(47);
  Tensor grid = random_tensor({h * w, d}, rng);
  Linear value = Linear::fixed(identity(d), Tensor({1, d}));
  Linear offset = Linear::fixed(Tensor({d, 2}), Tensor({1, 2}));  // all zero
  Linear weight = Linear::fixed(Tensor({d, 1}), Tensor({1, 1}));  // P=1
  Linear out = Linear::fixed(identity(d), Tensor({1, d}));
  Var y = deformable_core(constant(grid), h, w, value, offset, weight, out,
                          /*heads=*/1, /*points=*/1);
  for (std::int64_t i = 0; i < grid.numel(); ++i)
    CHECK(y->value[i] == grid[i]);
}

TEST_CASE("deformable core matches the interpolation oracle") {
  const std::int64_t d = 8, h = 4, w = 4;
  Rng rng(53);
  Tensor grid = random_tensor({h * w, d}, rng);
  ParamStore store;
  DeformableBlock blk =
      DeformableBlock::create(store, "dsa", d, /*heads=*/2, /*points=*/3,
                              /*dense=*/false, rng);
  Var x = constant(grid);
  Var y = deformable_core(x, h, w, blk.value, blk.offset, blk.weight, blk.out,
                          2, 3);

  // recompute one output position from first principles
  auto lin = [](const Tensor& in, const Linear& l, std::int64_t row) {
    std::vector<double> out(static_cast<std::size_t>(l.weight->value.cols()));
    for (std::int64_t j = 0; j < l.weight->value.cols(); ++j) {
      double acc = l.bias->value(0, j);
      for (std::int64_t k = 0; k < in.cols(); ++k)
        acc += in(row, k) * l.weight->value(k, j);
      out[static_cast<std::size_t>(j)] = acc;
    }
    return out;
  };
  Tensor vals({h * w, d});
  for (std::int64_t r = 0; r < h * w; ++r) {
    auto v = lin(grid, blk.value, r);
    for (std::int64_t c = 0; c < d; ++c) vals(r, c) = v[static_cast<std::size_t>(c)];
  }
  const int heads = 2, points = 3;
  const std::int64_t dh = d / heads;
  for (std::int64_t pos = 0; pos < h * w; ++pos) {
    auto offs = lin(grid, blk.offset, pos);
    auto wraw = lin(grid, blk.weight, pos);
    std::vector<double> mixed(static_cast<std::size_t>(d), 0.0);
    for (int hd = 0; hd < heads; ++hd) {
      // softmax over the points of this head
      double mx = -1e300;
      for (int p = 0; p < points; ++p)
        mx = std::max(mx, wraw[static_cast<std::size_t>(hd * points + p)]);
      double denom = 0.0;
      std::vector<double> sw(static_cast<std::size_t>(points));
      for (int p = 0; p < points; ++p) {
        sw[static_cast<std::size_t>(p)] =
            std::exp(wraw[static_cast<std::size_t>(hd * points + p)] - mx);
        denom += sw[static_cast<std::size_t>(p)];
      }
      Tensor head_vals({h * w, dh});
      for (std::int64_t r = 0; r < h * w; ++r)
        for (std::int64_t c = 0; c < dh; ++c)
          head_vals(r, c) = vals(r, hd * dh + c);
      for (int p = 0; p < points; ++p) {
        double dy = offs[static_cast<std::size_t>((hd * points + p) * 2)];
        double dx = offs[static_cast<std::size_t>((hd * points + p) * 2 + 1)];
        auto s = oracle::bilinear_at(head_vals, h, w,
                                     static_cast<double>(pos / w) + dy,
                                     static_cast<double>(pos % w) + dx);
        for (std::int64_t c = 0; c < dh; ++c)
          mixed[static_cast<std::size_t>(hd * dh + c)] +=
              sw[static_cast<std::size_t>(p)] / denom *
              s[static_cast<std::size_t>(c)];
      }
    }
    Tensor mixed_t({1, d});
    for (std::int64_t c = 0; c < d; ++c)
      mixed_t(0, c) = mixed[static_cast<std::size_t>(c)];
    auto expected = lin(mixed_t, blk.out, 0);
    for (std::int64_t c = 0; c < d; ++c)
      CHECK(y->value(pos, c) ==
            doctest::Approx(expected[static_cast<std::size_t>(c)])
                .epsilon(1e-10));
  }
}

TEST_CASE("adamw: zero gradient and zero decay leaves params unchanged") {
  Rng rng(59);
  ParamStore store;
  Var p = store.add("p", random_tensor({2, 3}, rng));
  Tensor before = p->value;
  p->ensure_grad();
  p->zero_grad();
  AdamW opt(1e-3, 0.0);
  opt.step(store);
  CHECK(bitwise_equal(p->value, before));
}

TEST_CASE("adamw skips frozen parameters") {
  Rng rng(61);
  ParamStore store;
  Var a = store.add("a", random_tensor({2, 2}, rng));
  Var b = store.add("frozen.b", random_tensor({2, 2}, rng), /*frozen=*/true);
  Tensor a0 = a->value, b0 = b->value;
  a->ensure_grad().fill(1.0);
  b->ensure_grad().fill(1.0);
  AdamW opt(1e-2, 0.01);
  opt.step(store);
  CHECK(!bitwise_equal(a->value, a0));
  CHECK(bitwise_equal(b->value, b0));
}

TEST_CASE("l2_normalize_rows: unit rows, idempotent, rejects zero rows") {
  Rng rng(67);
  Var x = param(random_tensor({3, 5}, rng));
  Var n1 = l2_normalize_rows(x);
  for (std::int64_t i = 0; i < 3; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < 5; ++j) acc += n1->value(i, j) * n1->value(i, j);
    CHECK(std::sqrt(acc) == doctest::Approx(1.0).epsilon(1e-12));
  }
  Var n2 = l2_normalize_rows(n1);
  for (std::int64_t i = 0; i < n1->value.numel(); ++i)
    CHECK(n2->value[i] == doctest::Approx(n1->value[i]).epsilon(1e-12));

  Tensor z({2, 3});
  z(0, 0) = 1.0;  // row 1 is all zero
  CHECK_THROWS_AS(l2_normalize_rows(constant(z)), NumericalError);
}
