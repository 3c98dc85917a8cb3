#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "oracles.hpp"

#include "conceptseg/encoders.hpp"

using namespace cseg;

namespace {

TextEncoderSpec hash_spec(std::int64_t dim = 16, std::uint64_t seed = 0) {
  TextEncoderSpec s;
  s.mode = TextEncoderMode::SyntheticHash;
  s.dim = dim;
  s.seed = seed;
  return s;
}

Image ramp_image(int h, int w) {
  Image img;
  img.h = h;
  img.w = w;
  img.image_id = "ramp";
  img.pixels.resize(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) =
            std::fmod(0.05 + 0.13 * y + 0.29 * x + 0.41 * c, 1.0);
  return img;
}

}  // namespace

TEST_CASE("encode_text: identical labels give identical rows") {
  auto table = encode_text({"cat", "cat"}, hash_spec());
  for (std::int64_t j = 0; j < table.dim; ++j)
    CHECK(table.vectors(0, j) == table.vectors(1, j));
}

TEST_CASE("encode_text: rows are unit norm") {
  auto table = encode_text({"cat", "dog", "tree"}, hash_spec(24, 7));
  table.validate();
  for (std::int64_t i = 0; i < 3; ++i) {
    double norm = 0;
    for (std::int64_t j = 0; j < table.dim; ++j)
      norm += table.vectors(i, j) * table.vectors(i, j);
    CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("encode_text: different seeds give different tables") {
  auto a = encode_text({"cat", "dog"}, hash_spec(16, 1));
  auto b = encode_text({"cat", "dog"}, hash_spec(16, 2));
  bool differs = false;
  for (std::int64_t i = 0; i < a.vectors.numel(); ++i)
    differs |= a.vectors[i] != b.vectors[i];
  CHECK(differs);
}

TEST_CASE("encode_text: label normalization and blank rejection") {
  auto a = encode_text({"  Cat "}, hash_spec());
  auto b = encode_text({"cat"}, hash_spec());
  for (std::int64_t j = 0; j < a.dim; ++j)
    CHECK(a.vectors(0, j) == b.vectors(0, j));
  CHECK_THROWS_AS(encode_text({"   "}, hash_spec()), ValidationError);
  CHECK_THROWS_AS(encode_text({}, hash_spec()), ValidationError);
}

TEST_CASE("encode_text: lookup table round trip with renormalization") {
  namespace fs = std::filesystem;
  fs::path file = fs::temp_directory_path() / "cseg_embed_test.json";
  write_embedding_file(file.string(),
                       {{"cat", {2.0, 0.0, 0.0, 0.0}},
                        {"dog", {0.0, 3.0, 0.0, 0.0}}});
  TextEncoderSpec spec;
  spec.mode = TextEncoderMode::LookupTable;
  spec.dim = 4;
  spec.file = file.string();
  auto table = encode_text({"cat", "dog"}, spec);
  CHECK(table.vectors(0, 0) == doctest::Approx(1.0));
  CHECK(table.vectors(1, 1) == doctest::Approx(1.0));
  CHECK_THROWS_AS(encode_text({"bird"}, spec), ValidationError);
  fs::remove(file);
}

TEST_CASE("backbone: deterministic and correctly shaped") {
  nn::ParamStore store;
  Rng rng(11);
  Backbone bb = Backbone::create(store, 8, rng);
  Image img = ramp_image(16, 16);
  FeatureGrid g1 = encode_image(img, bb);
  FeatureGrid g2 = encode_image(img, bb);
  CHECK(g1.h == 4);
  CHECK(g1.w == 4);
  CHECK(g1.stride == 4);
  CHECK(g1.features.cols() == 8);
  CHECK(bitwise_equal(g1.features, g2.features));

  // ceil semantics for non-multiple sizes
  Image odd = ramp_image(18, 13);
  FeatureGrid g3 = encode_image(odd, bb);
  CHECK(g3.h == 5);   // ceil(18/4) with two ceil-halvings: 18->9->5
  CHECK(g3.w == 4);   // 13->7->4
}

TEST_CASE("backbone gradients match finite differences") {
  nn::ParamStore store;
  Rng rng(13);
  Backbone bb = Backbone::create(store, 8, rng);
  store.set_frozen("backbone.", false);
  Image img = ramp_image(8, 8);
  Tensor mix({4, 8});
  Rng mix_rng(99);
  for (std::int64_t i = 0; i < mix.numel(); ++i) mix[i] = mix_rng.normal();
  auto build = [&]() {
    GridVar g = bb.forward(img);
    return ad::mean_all(ad::mul(g.features, ad::constant(mix)));
  };
  std::vector<std::pair<std::string, ad::Var>> params;
  for (const auto& e : store.entries()) params.emplace_back(e.name, e.var);
  auto res = oracle::check_gradients(build, params, 1e-5);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("frozen backbone stays bitwise frozen under optimizer steps") {
  nn::ParamStore store;
  Rng rng(17);
  Backbone bb = Backbone::create(store, 8, rng);
  store.set_frozen("backbone.", true);
  std::vector<Tensor> before;
  for (const auto& e : store.entries()) before.push_back(e.var->value);
  nn::AdamW opt(1e-2, 0.05);
  for (const auto& e : store.entries()) e.var->ensure_grad().fill(0.5);
  for (int i = 0; i < 3; ++i) opt.step(store);
  for (std::size_t i = 0; i < store.size(); ++i)
    CHECK(bitwise_equal(store.entries()[i].var->value, before[i]));
}
