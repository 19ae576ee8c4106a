#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "mmgpt/numerics/tensor.hpp"

namespace mmgpt::nn {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
};

/// Reverse-mode tape. One tape per forward pass; values are immutable once
/// recorded. Parameters enter as leaves and receive gradients into
/// Tensor::grad when they require it and the tape tracks gradients.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool track_gradients = true) : track_(track_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool tracking() const { return track_; }

  Var<T> constant(Tensor<T> value);
  /// Leaf bound to a parameter. Repeated calls with the same tensor return
  /// the same leaf.
  Var<T> param(Tensor<T>& parameter);

  /// Seeds d(root)/d(root) = 1 and propagates. root must hold one element.
  void backward(Var<T> root);

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Op-author interface.
  Var<T> record(Tensor<T> value, std::span<const std::size_t> inputs, BackwardFn backward);
  /// Gradient buffer of a node, allocated as zeros on first access.
  std::vector<T>& grad(std::size_t id);
  const std::vector<T>& grad_view(std::size_t id) const { return nodes_[id].grad; }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    BackwardFn backward;
    Tensor<T>* parameter = nullptr;
    bool needs_grad = false;
  };

  bool track_;
  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, std::size_t> leaves_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

// Matrix ops expect 2-D operands; vectors use shape {n}.

/// [m x k] . [k x n] -> [m x n]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
/// [m x k] . [n x k]^T -> [m x n]; the shape of a linear map y = x W^T.
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b);
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
/// x[m x n] + b[n] broadcast over rows.
template <typename T>
Var<T> add_row(Var<T> x, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> x, T factor);
/// s (one element) times every entry of x.
template <typename T>
Var<T> mul_scalar(Var<T> s, Var<T> x);
template <typename T>
Var<T> tanh(Var<T> x);
/// tanh approximation of GELU.
template <typename T>
Var<T> gelu(Var<T> x);
template <typename T>
Var<T> softmax_lastdim(Var<T> x);
/// Row i is normalized over columns 0..i only; later columns are exactly 0.
template <typename T>
Var<T> causal_softmax(Var<T> x);
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));
/// Mean over masked rows of -log softmax(logits[i])[targets[i]].
template <typename T>
Var<T> cross_entropy_masked(Var<T> logits, std::span<const std::int32_t> targets, std::span<const bool> mask);
template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::int32_t> ids);
template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end);
template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end);
template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts);
template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts);
/// Zeroes rows whose keep flag is false.
template <typename T>
Var<T> mask_rows(Var<T> x, std::span<const bool> keep);
template <typename T>
Var<T> sum(Var<T> x);

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace mmgpt::nn
