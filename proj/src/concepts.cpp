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

#include "conceptseg/concepts.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#include "json.hpp"

using json = nlohmann::json;

namespace cseg {

void ConceptSet::validate() const {
  std::set<std::string> seen;
  for (const ConceptEntry& c : concepts) {
    std::string norm = normalize_label(c.label);
    if (norm.empty()) throw ValidationError("concept set: blank label");
    if (!seen.insert(norm).second)
      throw ValidationError("concept set: duplicate label '" + norm + "'");
    if (!(c.confidence >= 0.0 && c.confidence <= 1.0))
      throw ValidationError("concept set: confidence out of [0,1] for '" +
                            norm + "'");
    if (c.token_probs) {
      double mean = aggregate_confidence(*c.token_probs);
      if (std::abs(mean - c.confidence) > 1e-9)
        throw ValidationError(
            "concept set: confidence does not equal the token mean for '" +
            norm + "'");
    }
  }
}

double aggregate_confidence(const std::vector<double>& token_probs) {
  if (token_probs.empty())
    throw ValidationError("aggregate_confidence: empty token list");
  double acc = 0.0;
  for (double p : token_probs) {
    if (!(p >= 0.0 && p <= 1.0))
      throw ValidationError("aggregate_confidence: probability out of [0,1]");
    acc += p;
  }
  return acc / static_cast<double>(token_probs.size());
}

// ---------------------------------------------------------------------------

namespace {

std::vector<ConceptEntry> parse_entries(const json& arr,
                                        const std::string& where) {
  std::vector<ConceptEntry> out;
  for (const json& e : arr) {
    ConceptEntry entry;
    entry.label = normalize_label(e.at("label").get<std::string>());
    bool has_conf = e.contains("confidence");
    bool has_tokens = e.contains("token_probs");
    if (has_tokens) {
      entry.token_probs = e.at("token_probs").get<std::vector<double>>();
      entry.confidence = aggregate_confidence(*entry.token_probs);
      if (has_conf)
        std::cerr << "warning: " << where << ": entry '" << entry.label
                  << "' has both confidence and token_probs; token_probs wins\n";
    } else if (has_conf) {
      entry.confidence = e.at("confidence").get<double>();
    } else {
      entry.confidence = 1.0;
    }
    out.push_back(std::move(entry));
  }
  return out;
}

}  // namespace

ScriptedProvider ScriptedProvider::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open concept file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("cannot parse concept file " + path + ": " + e.what());
  }
  if (!j.contains("schema_version") || j["schema_version"].get<int>() != 1)
    throw ValidationError("concept file " + path +
                          ": unsupported schema version");
  ScriptedProvider p;
  p.path_ = path;
  p.prompt_ = j.value("prompt", std::string(kDefaultConceptPrompt));
  const json& results = j.at("results");
  for (auto it = results.begin(); it != results.end(); ++it)
    p.results_[it.key()] =
        parse_entries(it.value(), path + ":" + it.key());
  return p;
}

ConceptSet ScriptedProvider::provide(const std::string& image_id) const {
  auto it = results_.find(image_id);
  if (it == results_.end())
    throw LookupError("concept file " + path_ + " has no entry for image '" +
                      image_id + "'");
  ConceptSet set;
  set.image_id = image_id;
  set.prompt = prompt_;
  set.concepts = it->second;
  set.validate();
  return set;
}

OracleProvider::OracleProvider(const std::vector<Scene>& scenes,
                               const Vocabulary& vocab) {
  for (const Scene& scene : scenes) {
    std::vector<std::string> labels;
    for (int cid : scene.second.present_categories())
      labels.push_back(vocab.category(cid).label);
    labels_by_image_[scene.second.image_id] = std::move(labels);
  }
}

ConceptSet OracleProvider::provide(const std::string& image_id) const {
  auto it = labels_by_image_.find(image_id);
  if (it == labels_by_image_.end())
    throw LookupError("oracle provider has no annotations for image '" +
                      image_id + "'");
  ConceptSet set;
  set.image_id = image_id;
  set.prompt = kDefaultConceptPrompt;
  for (const std::string& label : it->second)
    set.concepts.push_back({normalize_label(label), 1.0, std::nullopt});
  set.validate();
  return set;
}

ConceptSet LiveAdapterProvider::provide(const std::string& image_id) const {
  std::string cmd = command_ + " " + image_id;
  std::FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe)
    throw ProviderError("live concept adapter unavailable: " + command_);
  std::string output;
  char buf[4096];
  std::size_t got;
  while ((got = std::fread(buf, 1, sizeof(buf), pipe)) > 0)
    output.append(buf, got);
  int status = pclose(pipe);
  if (status != 0)
    throw ProviderError("live concept adapter failed (exit " +
                        std::to_string(status) + "): " + command_);
  json j;
  try {
    j = json::parse(output);
  } catch (const json::exception& e) {
    throw ProviderError(std::string("live concept adapter emitted invalid "
                                    "JSON: ") + e.what());
  }
  ConceptSet set;
  set.image_id = image_id;
  set.prompt = j.value("prompt", std::string(kDefaultConceptPrompt));
  set.concepts = parse_entries(j.at("results").at(image_id), "live:" + image_id);
  set.validate();
  return set;
}

// ---------------------------------------------------------------------------

std::map<int, double> MappedConceptSet::merged_confidences() const {
  std::map<int, double> merged;
  for (const MappedConcept& m : entries) {
    auto [it, inserted] = merged.emplace(m.target_category_id, m.confidence);
    if (!inserted) it->second = std::max(it->second, m.confidence);
  }
  return merged;
}

std::vector<int> MappedConceptSet::mapped_category_ids() const {
  std::set<int> ids;
  for (const MappedConcept& m : entries) ids.insert(m.target_category_id);
  return {ids.begin(), ids.end()};
}

MappedConceptSet map_to_vocabulary(const ConceptSet& concepts,
                                   const Vocabulary& vocab,
                                   const CategoryEmbeddingTable& table,
                                   const TextEncoderSpec& encoder) {
  vocab.validate();
  table.validate();
  if (table.vectors.rows() != vocab.size())
    throw ValidationError("map_to_vocabulary: table does not cover vocabulary");
  concepts.validate();

  MappedConceptSet out;
  if (concepts.concepts.empty()) return out;

  std::vector<std::string> labels;
  for (const ConceptEntry& c : concepts.concepts) labels.push_back(c.label);
  CategoryEmbeddingTable encoded = encode_text(labels, encoder);

  for (std::size_t i = 0; i < concepts.concepts.size(); ++i) {
    double best = -2.0;
    int best_id = -1;
    for (std::int64_t row = 0; row < table.vectors.rows(); ++row) {
      double dot = 0.0;
      for (std::int64_t j = 0; j < table.dim; ++j)
        dot += encoded.vectors(static_cast<std::int64_t>(i), j) *
               table.vectors(row, j);
      if (dot > best) {  // strict: ties keep the lowest category id
        best = dot;
        best_id = static_cast<int>(row);
      }
    }
    out.entries.push_back({concepts.concepts[i].label, best_id, best,
                           concepts.concepts[i].confidence});
  }
  return out;
}

}  // namespace cseg
