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
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "conceptseg/encoders.hpp"
#include "conceptseg/synth.hpp"

namespace cseg {

inline constexpr const char* kDefaultConceptPrompt =
    "Identify all nonredundant classes of objects you can see";

struct ConceptEntry {
  std::string label;  // normalized
  double confidence = 1.0;
  std::optional<std::vector<double>> token_probs;
};

// Per-image open-set concepts with confidences.
struct ConceptSet {
  std::string image_id;
  std::string prompt;
  std::vector<ConceptEntry> concepts;

  void validate() const;
};

// Arithmetic mean of the per-token probabilities of one concept.
double aggregate_confidence(const std::vector<double>& token_probs);

// Concept sources. All implementations are deterministic except the live
// adapter, which shells out to an external generator.
class ConceptProvider {
 public:
  virtual ~ConceptProvider() = default;
  virtual ConceptSet provide(const std::string& image_id) const = 0;
};

// Replays a concept file (see file schema in the repository README).
class ScriptedProvider : public ConceptProvider {
 public:
  static ScriptedProvider load(const std::string& path);
  ConceptSet provide(const std::string& image_id) const override;
  const std::string& prompt() const { return prompt_; }

 private:
  std::string prompt_;
  std::map<std::string, std::vector<ConceptEntry>> results_;
  std::string path_;
};

// Returns exactly the ground-truth category labels present in the image,
// each with confidence 1.0.
class OracleProvider : public ConceptProvider {
 public:
  OracleProvider(const std::vector<Scene>& scenes, const Vocabulary& vocab);
  ConceptSet provide(const std::string& image_id) const override;

 private:
  std::map<std::string, std::vector<std::string>> labels_by_image_;
};

// Runs `command <image_id>` and parses a single-image concept file from its
// stdout. Never exercised by the test suite; failures raise ProviderError.
class LiveAdapterProvider : public ConceptProvider {
 public:
  explicit LiveAdapterProvider(std::string command)
      : command_(std::move(command)) {}
  ConceptSet provide(const std::string& image_id) const override;

 private:
  std::string command_;
};

struct MappedConcept {
  std::string source_label;
  int target_category_id = -1;
  double similarity = 0.0;
  double confidence = 0.0;
};

struct MappedConceptSet {
  std::vector<MappedConcept> entries;  // one per source concept

  // Per-category confidence merged with the max rule; categories mapped by
  // several concepts keep the largest confidence.
  std::map<int, double> merged_confidences() const;
  std::vector<int> mapped_category_ids() const;  // sorted unique
};

// Assigns every concept its nearest vocabulary category by cosine similarity
// in the shared text-embedding space (ties break toward the lower id).
MappedConceptSet map_to_vocabulary(const ConceptSet& concepts,
                                   const Vocabulary& vocab,
                                   const CategoryEmbeddingTable& table,
                                   const TextEncoderSpec& encoder);

}  // namespace cseg
