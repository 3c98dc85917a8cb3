#include <cmath>

#include "doctest.h"
#include "oracles.hpp"

#include "conceptseg/enhancer.hpp"

using namespace cseg;
using ad::Var;

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng,
                     double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
  return t;
}

CategoryEmbeddingTable random_table(int n, std::int64_t dim,
                                    std::uint64_t seed) {
  std::vector<std::string> labels;
  for (int i = 0; i < n; ++i) labels.push_back("cat" + std::to_string(i));
  TextEncoderSpec spec;
  spec.dim = dim;
  spec.seed = seed;
  return encode_text(labels, spec);
}

GridVar random_grid(int h, int w, std::int64_t dim, Rng& rng) {
  GridVar g;
  g.h = h;
  g.w = w;
  g.stride = 4;
  g.features = ad::constant(random_tensor({static_cast<std::int64_t>(h) * w,
                                           dim},
                                          rng));
  return g;
}

// zero every parameter whose name contains one of the substrings
void zero_params(nn::ParamStore& store,
                 const std::vector<std::string>& substrings) {
  for (const auto& e : store.entries())
    for (const std::string& s : substrings)
      if (e.name.find(s) != std::string::npos) e.var->value.fill(0.0);
}

}  // namespace

TEST_CASE("batch context and attention mask construction") {
  auto table = random_table(6, 8, 1);
  BatchConceptContext ctx =
      make_batch_context({{1, 3}, {3, 5}}, table, {2});
  CHECK(ctx.batch_categories == std::vector<int>({1, 2, 3, 5}));
  CHECK(ctx.member_positions[0] == std::vector<int>({0, 2}));
  CHECK(ctx.member_positions[1] == std::vector<int>({2, 3}));
  AttentionMaskMatrix mask = build_attention_mask(ctx);
  CHECK(mask.values(0, 0) == 0.0);
  CHECK(mask.values(0, 1) == -std::numeric_limits<double>::infinity());
  CHECK(mask.values(0, 2) == 0.0);
  CHECK(mask.values(1, 3) == 0.0);

  // an image with no concepts is rejected
  CHECK_THROWS_AS(make_batch_context({{}}, table), ValidationError);
}

TEST_CASE("cave_forward rejects mask/membership inconsistency") {
  auto table = random_table(4, 8, 2);
  BatchConceptContext ctx = make_batch_context({{0, 1}}, table);
  AttentionMaskMatrix mask = build_attention_mask(ctx);
  Rng rng(3);
  nn::ParamStore store;
  EnhancerConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.dsa_points = 1;
  EnhancerParams params = EnhancerParams::create(store, 8, cfg, rng);
  std::vector<GridVar> grids = {random_grid(2, 2, 8, rng)};
  mask.values(0, 0) = -std::numeric_limits<double>::infinity();
  mask.values(0, 1) = 0.0;  // still one open entry, but wrong column
  CHECK_THROWS_AS(cave_forward(ctx, grids, mask, params), ValidationError);
}

TEST_CASE("identity-wired enhancer passes features through unchanged") {
  Rng rng(5);
  const std::int64_t dim = 8;
  nn::ParamStore store;
  EnhancerConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.dsa_points = 2;
  EnhancerParams params = EnhancerParams::create(store, dim, cfg, rng);
  // zero the output side of every sub-block: attention output projections,
  // second FFN layers, DSA output projection
  zero_params(store, {".o.w", ".o.b", ".l2.w", ".l2.b", ".dsa.out.w",
                      ".dsa.out.b"});

  auto table = random_table(5, dim, 7);
  BatchConceptContext ctx = make_batch_context({{0, 2, 4}}, table);
  AttentionMaskMatrix mask = build_attention_mask(ctx);
  std::vector<GridVar> grids = {random_grid(3, 3, dim, rng)};
  Tensor original = grids[0].features->value;

  EnhancerResult out = cave_forward(ctx, grids, mask, params);
  CHECK(bitwise_equal(out.enhanced[0].features->value, original));
}

TEST_CASE("fully masked categories leave every output bit-identical") {
  Rng rng(11);
  const std::int64_t dim = 8;
  nn::ParamStore store;
  EnhancerConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.dsa_points = 2;
  EnhancerParams params = EnhancerParams::create(store, dim, cfg, rng);

  auto table = random_table(8, dim, 13);
  // categories 6 and 7 appear in no image but sit in the batch context
  BatchConceptContext ctx = make_batch_context({{0, 1}, {1, 3}}, table, {6, 7});
  AttentionMaskMatrix mask = build_attention_mask(ctx);
  std::vector<GridVar> grids = {random_grid(3, 4, dim, rng),
                                random_grid(3, 4, dim, rng)};

  EnhancerResult base = cave_forward(ctx, grids, mask, params);

  Rng perturb(17);
  for (int trial = 0; trial < 20; ++trial) {
    BatchConceptContext mutated = ctx;
    for (int col = 0; col < mutated.category_count(); ++col) {
      bool grounded = false;
      for (int i = 0; i < mutated.batch_size(); ++i)
        grounded |= mask.values(i, col) == 0.0;
      if (grounded) continue;
      for (std::int64_t j = 0; j < dim; ++j)
        mutated.embeddings(col, j) = perturb.normal() * 3.0;
    }
    EnhancerResult out = cave_forward(mutated, grids, mask, params);
    for (int i = 0; i < 2; ++i)
      CHECK(bitwise_equal(out.enhanced[i].features->value,
                          base.enhanced[i].features->value));
    CHECK(bitwise_equal(out.refined_concepts->value,
                        base.refined_concepts->value));
  }
}

TEST_CASE("joint batch equals per-image runs") {
  Rng rng(19);
  const std::int64_t dim = 8;
  nn::ParamStore store;
  EnhancerConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.dsa_points = 2;
  EnhancerParams params = EnhancerParams::create(store, dim, cfg, rng);

  auto table = random_table(6, dim, 23);
  std::vector<std::vector<int>> members = {{0, 2, 3}, {1, 3, 5}};  // share 3
  BatchConceptContext joint_ctx = make_batch_context(members, table);
  AttentionMaskMatrix joint_mask = build_attention_mask(joint_ctx);
  std::vector<GridVar> grids = {random_grid(3, 3, dim, rng),
                                random_grid(4, 2, dim, rng)};
  EnhancerResult joint = cave_forward(joint_ctx, grids, joint_mask, params);

  for (int i = 0; i < 2; ++i) {
    BatchConceptContext solo_ctx =
        make_batch_context({members[static_cast<std::size_t>(i)]}, table);
    AttentionMaskMatrix solo_mask = build_attention_mask(solo_ctx);
    std::vector<GridVar> solo_grid = {grids[static_cast<std::size_t>(i)]};
    EnhancerResult solo = cave_forward(solo_ctx, solo_grid, solo_mask, params);
    const Tensor& a = joint.enhanced[static_cast<std::size_t>(i)]
                          .features->value;
    const Tensor& b = solo.enhanced[0].features->value;
    REQUIRE(a.shape() == b.shape());
    for (std::int64_t x = 0; x < a.numel(); ++x) {
      double denom = std::max({std::abs(a[x]), std::abs(b[x]), 1e-12});
      CHECK(std::abs(a[x] - b[x]) / denom < 1e-5);
    }
  }
}

TEST_CASE("enhancer gradients match finite differences (tiny config)") {
  Rng rng(29);
  const std::int64_t dim = 8;
  nn::ParamStore store;
  EnhancerConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.dsa_points = 2;
  EnhancerParams params = EnhancerParams::create(store, dim, cfg, rng);

  auto table = random_table(4, dim, 31);
  BatchConceptContext ctx = make_batch_context({{0, 1, 3}}, table);
  AttentionMaskMatrix mask = build_attention_mask(ctx);
  GridVar grid = random_grid(4, 4, dim, rng);
  Tensor mix = random_tensor({16, dim}, rng);
  Tensor mix2 = random_tensor({4, dim}, rng);

  auto build = [&]() {
    EnhancerResult out = cave_forward(ctx, {grid}, mask, params);
    Var a = ad::mean_all(ad::mul(out.enhanced[0].features, ad::constant(mix)));
    Var b =
        ad::mean_all(ad::mul(out.refined_concepts, ad::constant(mix2)));
    return ad::add(a, b);
  };
  std::vector<std::pair<std::string, Var>> tracked;
  for (const auto& e : store.entries()) tracked.emplace_back(e.name, e.var);
  auto res = oracle::check_gradients(build, tracked, 1e-5);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("dense DSA fallback preserves shape and differs from identity") {
  Rng rng(37);
  const std::int64_t dim = 8;
  nn::ParamStore store;
  EnhancerConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.dsa_dense = true;
  EnhancerParams params = EnhancerParams::create(store, dim, cfg, rng);
  auto table = random_table(3, dim, 41);
  BatchConceptContext ctx = make_batch_context({{0, 1}}, table);
  AttentionMaskMatrix mask = build_attention_mask(ctx);
  std::vector<GridVar> grids = {random_grid(3, 3, dim, rng)};
  Tensor before = grids[0].features->value;
  EnhancerResult out = cave_forward(ctx, grids, mask, params);
  CHECK(out.enhanced[0].features->value.shape() == before.shape());
  CHECK(!bitwise_equal(out.enhanced[0].features->value, before));
}
