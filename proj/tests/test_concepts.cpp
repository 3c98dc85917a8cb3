#include <filesystem>
#include <fstream>

#include "doctest.h"

#include "conceptseg/concepts.hpp"
#include "conceptseg/metrics.hpp"

using namespace cseg;
namespace fs = std::filesystem;

namespace {

Vocabulary toy_vocab() {
  Vocabulary v;
  v.categories = {{0, "backdrop", false},
                  {1, "disc", true},
                  {2, "block", true},
                  {3, "wedge", true}};
  v.seen_mask = {true, true, true, true};
  return v;
}

TextEncoderSpec hash_spec(std::int64_t dim = 16) {
  TextEncoderSpec s;
  s.dim = dim;
  s.seed = 3;
  return s;
}

}  // namespace

TEST_CASE("aggregate_confidence: means and contracts") {
  CHECK(aggregate_confidence({0.8, 0.6}) == doctest::Approx(0.7));
  CHECK(aggregate_confidence({1.0}) == doctest::Approx(1.0));
  CHECK(aggregate_confidence({0.0, 0.0, 0.0}) == doctest::Approx(0.0));
  CHECK_THROWS_AS(aggregate_confidence({}), ValidationError);
  CHECK_THROWS_AS(aggregate_confidence({0.5, 1.2}), ValidationError);
  CHECK_THROWS_AS(aggregate_confidence({-0.1}), ValidationError);
}

TEST_CASE("scripted provider: token probs, confidences and errors") {
  fs::path file = fs::temp_directory_path() / "cseg_concepts_test.json";
  {
    std::ofstream out(file);
    out << R"({
      "schema_version": 1,
      "prompt": "Identify all nonredundant classes of objects you can see",
      "results": {
        "img_000001": [
          {"label": "Disc", "token_probs": [0.9, 0.7]},
          {"label": "backdrop", "confidence": 0.5}
        ],
        "img_000002": [
          {"label": "wedge"}
        ]
      }
    })";
  }
  ScriptedProvider provider = ScriptedProvider::load(file.string());
  ConceptSet set = provider.provide("img_000001");
  REQUIRE(set.concepts.size() == 2);
  CHECK(set.concepts[0].label == "disc");
  CHECK(set.concepts[0].confidence == doctest::Approx(0.8));
  CHECK(set.concepts[1].confidence == doctest::Approx(0.5));
  CHECK(set.prompt == kDefaultConceptPrompt);

  ConceptSet bare = provider.provide("img_000002");
  CHECK(bare.concepts[0].confidence == doctest::Approx(1.0));

  // repeated calls return equal sets
  ConceptSet again = provider.provide("img_000001");
  CHECK(again.concepts.size() == set.concepts.size());
  for (std::size_t i = 0; i < set.concepts.size(); ++i) {
    CHECK(again.concepts[i].label == set.concepts[i].label);
    CHECK(again.concepts[i].confidence == set.concepts[i].confidence);
  }

  try {
    provider.provide("img_042");
    FAIL("expected LookupError");
  } catch (const LookupError& e) {
    CHECK(std::string(e.what()).find("img_042") != std::string::npos);
  }
  fs::remove(file);
}

TEST_CASE("oracle provider returns exactly the present categories") {
  Vocabulary vocab = toy_vocab();
  SceneConfig cfg;
  cfg.h = 32;
  cfg.w = 32;
  cfg.max_objects = 2;
  cfg.seed = 9;
  cfg.shape_palette = default_palette(vocab);
  std::vector<Scene> scenes = {generate_scene(cfg, vocab)};
  OracleProvider provider(scenes, vocab);
  ConceptSet set = provider.provide(scenes[0].second.image_id);
  auto present = scenes[0].second.present_categories();
  REQUIRE(set.concepts.size() == present.size());
  for (std::size_t i = 0; i < present.size(); ++i) {
    CHECK(set.concepts[i].label ==
          normalize_label(vocab.category(present[i]).label));
    CHECK(set.concepts[i].confidence == 1.0);
  }

  // oracle precision/recall is exactly 1
  MappedConceptSet mapped = map_to_vocabulary(
      set, vocab, encode_text({"backdrop", "disc", "block", "wedge"},
                              hash_spec()),
      hash_spec());
  ConceptPRReport pr =
      concept_precision_recall(mapped.mapped_category_ids(), present);
  REQUIRE(pr.precision.has_value());
  REQUIRE(pr.recall.has_value());
  CHECK(*pr.precision == 1.0);
  CHECK(*pr.recall == 1.0);
}

TEST_CASE("map_to_vocabulary: exact label maps to its category") {
  Vocabulary vocab = toy_vocab();
  auto table = encode_text({"backdrop", "disc", "block", "wedge"}, hash_spec());
  ConceptSet set;
  set.image_id = "x";
  set.concepts = {{"disc", 0.9, std::nullopt}};
  MappedConceptSet mapped = map_to_vocabulary(set, vocab, table, hash_spec());
  REQUIRE(mapped.entries.size() == 1);
  CHECK(mapped.entries[0].target_category_id == 1);
  CHECK(mapped.entries[0].similarity == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(mapped.entries[0].confidence == doctest::Approx(0.9));
}

TEST_CASE("map_to_vocabulary: max-confidence merge per category") {
  Vocabulary vocab = toy_vocab();
  auto table = encode_text({"backdrop", "disc", "block", "wedge"}, hash_spec());
  ConceptSet set;
  set.image_id = "x";
  set.concepts = {{"block", 0.4, std::nullopt}, {"Block ", 0.9, std::nullopt}};
  // duplicate after normalization -> invalid as a concept set
  CHECK_THROWS_AS(set.validate(), ValidationError);

  // distinct labels that map to the same category keep the max
  ConceptSet distinct;
  distinct.image_id = "x";
  distinct.concepts = {{"block", 0.4, std::nullopt}};
  MappedConceptSet m1 =
      map_to_vocabulary(distinct, vocab, table, hash_spec());
  MappedConceptSet m2 = m1;
  m2.entries.push_back({"blockish", m1.entries[0].target_category_id, 0.7, 0.9});
  auto merged = m2.merged_confidences();
  CHECK(merged.at(m1.entries[0].target_category_id) == doctest::Approx(0.9));
}

TEST_CASE("map_to_vocabulary equals the brute-force cosine argmax") {
  Vocabulary vocab;
  for (int i = 0; i < 10; ++i)
    vocab.categories.push_back({i, "cat" + std::to_string(i), i > 0});
  vocab.seen_mask.assign(10, true);
  std::vector<std::string> labels;
  for (const auto& c : vocab.categories) labels.push_back(c.label);
  auto table = encode_text(labels, hash_spec(16));

  ConceptSet set;
  set.image_id = "x";
  set.concepts = {{"alpha", 0.2, std::nullopt},
                  {"beta", 0.4, std::nullopt},
                  {"gamma", 0.6, std::nullopt},
                  {"delta", 0.8, std::nullopt},
                  {"epsilon", 1.0, std::nullopt}};
  MappedConceptSet mapped = map_to_vocabulary(set, vocab, table, hash_spec(16));

  auto concept_table =
      encode_text({"alpha", "beta", "gamma", "delta", "epsilon"}, hash_spec(16));
  for (std::size_t i = 0; i < set.concepts.size(); ++i) {
    double best = -2.0;
    int best_id = -1;
    for (int c = 0; c < 10; ++c) {
      double dot = 0.0;
      for (std::int64_t j = 0; j < 16; ++j)
        dot += concept_table.vectors(static_cast<std::int64_t>(i), j) *
               table.vectors(c, j);
      if (dot > best) {
        best = dot;
        best_id = c;
      }
    }
    CHECK(mapped.entries[i].target_category_id == best_id);
    CHECK(mapped.entries[i].similarity == doctest::Approx(best).epsilon(1e-12));
    CHECK(mapped.entries[i].confidence ==
          doctest::Approx(set.concepts[i].confidence));
  }
}

TEST_CASE("concept precision/recall: set arithmetic and null contracts") {
  ConceptPRReport pr = concept_precision_recall({1, 2}, {1, 3});
  CHECK(*pr.precision == doctest::Approx(0.5));
  CHECK(*pr.recall == doctest::Approx(0.5));

  pr = concept_precision_recall({1, 3}, {1, 3});
  CHECK(*pr.precision == doctest::Approx(1.0));
  CHECK(*pr.recall == doctest::Approx(1.0));

  pr = concept_precision_recall({}, {1});
  CHECK(!pr.precision.has_value());
  REQUIRE(pr.recall.has_value());
  CHECK(*pr.recall == doctest::Approx(0.0));

  pr = concept_precision_recall({1}, {});
  CHECK(!pr.recall.has_value());
}
