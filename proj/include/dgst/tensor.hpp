#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "dgst/common.hpp"

namespace dgst {

int64_t shape_numel(std::span<const int64_t> shape);
std::string shape_str(std::span<const int64_t> shape);

// Dense row-major N-d array of `real`. The single numeric carrier for
// images, activations, weights and gradients.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<real> data;

  Tensor() = default;
  Tensor(std::vector<int64_t> s, std::vector<real> d);

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, real value);
  static Tensor scalar(real value) { return full({1}, value); }

  int64_t numel() const { return int64_t(data.size()); }
  int rank() const { return int(shape.size()); }
  int64_t dim(int i) const { return shape[size_t(i)]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  bool all_finite() const;

  real item() const;

  // 4-d convenience accessors (NCHW); test/setup code only.
  real& at4(int64_t n, int64_t c, int64_t h, int64_t w);
  real at4(int64_t n, int64_t c, int64_t h, int64_t w) const;
};

// Integer grid (class-id labels, index maps).
struct IntTensor {
  std::vector<int64_t> shape;
  std::vector<int32_t> data;

  IntTensor() = default;
  IntTensor(std::vector<int64_t> s, std::vector<int32_t> d);

  static IntTensor zeros(std::vector<int64_t> shape);

  int64_t numel() const { return int64_t(data.size()); }
  int64_t dim(int i) const { return shape[size_t(i)]; }
  bool same_shape(const IntTensor& other) const { return shape == other.shape; }
};

}  // namespace dgst
