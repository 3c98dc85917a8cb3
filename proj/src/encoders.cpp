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

#include "conceptseg/encoders.hpp"

#include <cctype>
#include <cmath>
#include <fstream>

#include "json.hpp"

using json = nlohmann::json;

namespace cseg {

std::string normalize_label(const std::string& label) {
  std::size_t a = 0, b = label.size();
  while (a < b && std::isspace(static_cast<unsigned char>(label[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(label[b - 1]))) --b;
  std::string out;
  out.reserve(b - a);
  for (std::size_t i = a; i < b; ++i)
    out.push_back(static_cast<char>(
        std::tolower(static_cast<unsigned char>(label[i]))));
  return out;
}

TextEncoderMode text_encoder_mode_from_string(const std::string& s) {
  if (s == "synthetic-hash") return TextEncoderMode::SyntheticHash;
  if (s == "lookup-table") return TextEncoderMode::LookupTable;
  if (s == "external-adapter") return TextEncoderMode::ExternalAdapter;
  throw ConfigError("unknown text encoder mode: " + s);
}

void TextEncoderSpec::validate() const {
  if (dim < 4 || dim % 2 != 0)
    throw ConfigError("text encoder dim must be even and >= 4");
  if (mode != TextEncoderMode::SyntheticHash && file.empty())
    throw ConfigError("text encoder mode requires an embedding file");
}

void CategoryEmbeddingTable::validate() const {
  if (vectors.rows() < 1) throw ValidationError("embedding table: empty");
  if (vectors.rows() != static_cast<std::int64_t>(labels.size()))
    throw ValidationError("embedding table: label/vector count mismatch");
  if (vectors.cols() != dim)
    throw ValidationError("embedding table: dim mismatch");
  for (std::int64_t i = 0; i < vectors.rows(); ++i) {
    double norm = 0.0;
    for (std::int64_t j = 0; j < dim; ++j)
      norm += vectors(i, j) * vectors(i, j);
    if (std::abs(std::sqrt(norm) - 1.0) > 1e-6)
      throw ValidationError("embedding table: row " + std::to_string(i) +
                            " is not unit norm");
  }
}

namespace {

void normalize_row(Tensor& t, std::int64_t row) {
  double norm = 0.0;
  for (std::int64_t j = 0; j < t.cols(); ++j) norm += t(row, j) * t(row, j);
  norm = std::sqrt(norm);
  if (norm < 1e-12)
    throw NumericalError("text embedding has zero norm");
  for (std::int64_t j = 0; j < t.cols(); ++j) t(row, j) /= norm;
}

}  // namespace

CategoryEmbeddingTable encode_text(const std::vector<std::string>& labels,
                                   const TextEncoderSpec& spec) {
  spec.validate();
  if (labels.empty()) throw ValidationError("encode_text: no labels");
  CategoryEmbeddingTable table;
  table.dim = spec.dim;
  table.labels = labels;
  table.vectors = Tensor({static_cast<std::int64_t>(labels.size()), spec.dim});

  std::map<std::string, std::vector<double>> lookup;
  if (spec.mode != TextEncoderMode::SyntheticHash)
    lookup = load_embedding_file(spec.file);

  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::string norm = normalize_label(labels[i]);
    if (norm.empty())
      throw ValidationError("encode_text: blank label at index " +
                            std::to_string(i));
    std::int64_t row = static_cast<std::int64_t>(i);
    if (spec.mode == TextEncoderMode::SyntheticHash) {
      Rng rng(splitmix64(fnv1a64(norm) ^ spec.seed));
      for (std::int64_t j = 0; j < spec.dim; ++j)
        table.vectors(row, j) = rng.normal();
    } else {
      auto it = lookup.find(norm);
      if (it == lookup.end())
        throw ValidationError("embedding file " + spec.file +
                              " has no entry for label '" + norm + "'");
      if (static_cast<std::int64_t>(it->second.size()) != spec.dim)
        throw ValidationError("embedding for '" + norm +
                              "' has wrong dimension");
      for (std::int64_t j = 0; j < spec.dim; ++j)
        table.vectors(row, j) = it->second[static_cast<std::size_t>(j)];
    }
    normalize_row(table.vectors, row);
  }
  return table;
}

std::map<std::string, std::vector<double>> load_embedding_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embedding file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("cannot parse embedding file " + path + ": " + e.what());
  }
  std::map<std::string, std::vector<double>> out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::vector<double> v = it.value().get<std::vector<double>>();
    out[normalize_label(it.key())] = std::move(v);
  }
  return out;
}

void write_embedding_file(const std::string& path,
                          const std::map<std::string, std::vector<double>>& m) {
  json j = json::object();
  for (const auto& [label, vec] : m) j[label] = vec;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write embedding file: " + path);
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------

Backbone Backbone::create(nn::ParamStore& store, std::int64_t dim, Rng& rng) {
  if (dim < 4 || dim % 2 != 0)
    throw ConfigError("backbone dim must be even and >= 4");
  Backbone b;
  b.dim = dim;
  std::int64_t mid = dim / 2;
  auto init = [&](std::int64_t rows, std::int64_t cols, double scale) {
    Tensor t({rows, cols});
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * scale;
    return t;
  };
  b.conv1_w = store.add("backbone.conv1.w", init(mid, 3 * 9, 0.35));
  b.conv1_b = store.add("backbone.conv1.b", init(1, mid, 0.05));
  b.conv2_w = store.add("backbone.conv2.w",
                        init(dim, mid * 9, 1.0 / std::sqrt(9.0 * mid)));
  b.conv2_b = store.add("backbone.conv2.b", init(1, dim, 0.05));
  return b;
}

GridVar Backbone::forward(const Image& image) const {
  image.validate();
  std::int64_t h = image.h, w = image.w;
  Tensor input({h * w, 3});
  for (std::int64_t i = 0; i < h * w; ++i)
    for (std::int64_t c = 0; c < 3; ++c)
      input(i, c) = image.pixels[static_cast<std::size_t>(i) * 3 +
                                 static_cast<std::size_t>(c)];
  ad::Var x = ad::constant(std::move(input));
  x = ad::gelu(ad::conv3x3(x, h, w, conv1_w, conv1_b));
  x = ad::avg_pool2(x, h, w);
  std::int64_t h2 = (h + 1) / 2, w2 = (w + 1) / 2;
  x = ad::gelu(ad::conv3x3(x, h2, w2, conv2_w, conv2_b));
  x = ad::avg_pool2(x, h2, w2);
  GridVar grid;
  grid.h = static_cast<int>((h2 + 1) / 2);
  grid.w = static_cast<int>((w2 + 1) / 2);
  grid.stride = 4;
  grid.features = x;
  return grid;
}

FeatureGrid encode_image(const Image& image, const Backbone& backbone) {
  GridVar g = backbone.forward(image);
  FeatureGrid out;
  out.h = g.h;
  out.w = g.w;
  out.stride = g.stride;
  out.features = g.features->value;
  return out;
}

}  // namespace cseg
