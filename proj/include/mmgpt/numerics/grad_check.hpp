#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mmgpt/numerics/autograd.hpp"

namespace mmgpt::nn {

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor: err = |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-6;
  /// 0 checks every entry; otherwise a seeded random subset per tensor.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
  /// Fourth-order stencil (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h.
  bool five_point = false;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Scalar map of one input, evaluated on a caller-provided tape.
using ScalarFn = std::function<Var<double>(Tape<double>&, Var<double>)>;

/// Reverse-mode gradient of f at x vs central differences (f(x+h)-f(x-h))/2h.
double grad_check(const ScalarFn& f, const Tensor<double>& x, double step = 1e-5);

struct NamedTensor {
  std::string name;
  Tensor<double>* tensor;
};

/// Same comparison over a set of parameter tensors that `loss` reads through
/// Tape::param. Gradients already stored in the tensors are overwritten.
GradCheckReport grad_check_params(const std::function<Var<double>(Tape<double>&)>& loss,
                                  std::span<const NamedTensor> params, const GradCheckOptions& options = {});

}  // namespace mmgpt::nn
