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

#include <cassert>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "conceptseg/common.hpp"

namespace cseg {

// Dense row-major tensor of doubles. All model math runs in double; the
// gradient-check suites rely on that.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(numel_of(shape_)), 0.0);
  }

  Tensor(std::initializer_list<std::int64_t> shape)
      : Tensor(std::vector<std::int64_t>(shape)) {}

  static Tensor zeros(std::vector<std::int64_t> shape) {
    return Tensor(std::move(shape));
  }

  static Tensor full(std::vector<std::int64_t> shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(double v) {
    Tensor t({1, 1});
    t.data_[0] = v;
    return t;
  }

  static Tensor from_data(std::vector<std::int64_t> shape,
                          std::vector<double> data) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (static_cast<std::int64_t>(data.size()) != numel_of(t.shape_))
      throw ValidationError("tensor data size does not match shape");
    t.data_ = std::move(data);
    return t;
  }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::int64_t rows() const {
    assert(ndim() == 2);
    return shape_[0];
  }
  std::int64_t cols() const {
    assert(ndim() == 2);
    return shape_[1];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::int64_t i) {
    return data_[static_cast<std::size_t>(i)];
  }
  double operator[](std::int64_t i) const {
    return data_[static_cast<std::size_t>(i)];
  }

  double& operator()(std::int64_t i, std::int64_t j) {
    assert(ndim() == 2);
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }
  double operator()(std::int64_t i, std::int64_t j) const {
    assert(ndim() == 2);
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }

  double& operator()(std::int64_t i, std::int64_t j, std::int64_t k) {
    assert(ndim() == 3);
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double operator()(std::int64_t i, std::int64_t j, std::int64_t k) const {
    assert(ndim() == 3);
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  static std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
      if (d < 0) throw ValidationError("negative tensor dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    // Bit-level comparison: distinguishes -0.0 from 0.0 and NaN payloads.
    std::uint64_t ba, bb;
    static_assert(sizeof(double) == sizeof(std::uint64_t));
    double va = a[i], vb = b[i];
    std::memcpy(&ba, &va, sizeof(double));
    std::memcpy(&bb, &vb, sizeof(double));
    if (ba != bb) return false;
  }
  return true;
}

}  // namespace cseg
