#pragma once

#include <algorithm>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmgpt/common/error.hpp"

namespace mmgpt::nn {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major tensor. T is float for training and double for
/// verification runs.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::optional<std::vector<T>> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<T> values, bool trainable = false)
      : shape(std::move(s)), data(std::move(values)), requires_grad(trainable) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (std::size_t e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (numel(shape) != data.size())
      throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                           shape_str(shape));
  }

  static Tensor zeros(Shape s) {
    const std::size_t n = numel(s);
    return Tensor(std::move(s), std::vector<T>(n, T(0)));
  }
  static Tensor filled(Shape s, T v) {
    const std::size_t n = numel(s);
    return Tensor(std::move(s), std::vector<T>(n, v));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.size() == 1 ? 1 : shape[0]; }
  std::size_t cols() const { return shape.back(); }
  T& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }
};

}  // namespace mmgpt::nn
