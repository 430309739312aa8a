#include "dgst/tensor.hpp"

#include <sstream>

namespace dgst {

int64_t shape_numel(std::span<const int64_t> shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d <= 0) throw shape_error("non-positive extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(std::span<const int64_t> shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int64_t> s, std::vector<real> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != int64_t(data.size()))
    throw shape_error("tensor data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_str(shape));
}

Tensor Tensor::zeros(std::vector<int64_t> shape) {
  const int64_t n = shape_numel(shape);
  Tensor t;
  t.shape = std::move(shape);
  t.data.assign(size_t(n), real(0));
  return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, real value) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.data) v = value;
  return t;
}

bool Tensor::all_finite() const {
  for (real v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

real Tensor::item() const {
  if (numel() != 1)
    throw shape_error("item() on non-scalar tensor " + shape_str(shape));
  return data[0];
}

real& Tensor::at4(int64_t n, int64_t c, int64_t h, int64_t w) {
  return data[size_t(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
}

real Tensor::at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
  return data[size_t(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
}

IntTensor::IntTensor(std::vector<int64_t> s, std::vector<int32_t> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != int64_t(data.size()))
    throw shape_error("int tensor data length does not match shape " +
                      shape_str(shape));
}

IntTensor IntTensor::zeros(std::vector<int64_t> shape) {
  const int64_t n = shape_numel(shape);
  IntTensor t;
  t.shape = std::move(shape);
  t.data.assign(size_t(n), 0);
  return t;
}

}  // namespace dgst
