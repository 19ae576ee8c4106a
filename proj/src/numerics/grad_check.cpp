#include "mmgpt/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmgpt/common/rng.hpp"

namespace mmgpt::nn {

namespace {

double rel_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace

double grad_check(const ScalarFn& f, const Tensor<double>& x, double step) {
  Tensor<double> point(x.shape, x.data, true);
  std::vector<NamedTensor> params{{"x", &point}};
  GradCheckOptions options;
  options.step = step;
  const auto report = grad_check_params([&](Tape<double>& tape) { return f(tape, tape.param(point)); }, params, options);
  return report.max_rel_error;
}

GradCheckReport grad_check_params(const std::function<Var<double>(Tape<double>&)>& loss,
                                  std::span<const NamedTensor> params, const GradCheckOptions& options) {
  for (const auto& p : params) p.tensor->grad.reset();
  {
    Tape<double> tape(true);
    tape.backward(loss(tape));
  }
  auto evaluate = [&]() {
    Tape<double> tape(false);
    return loss(tape).value().data[0];
  };

  GradCheckReport report;
  Rng rng(options.seed);
  for (const auto& p : params) {
    Tensor<double>& t = *p.tensor;
    std::vector<std::size_t> order(t.size());
    std::iota(order.begin(), order.end(), 0);
    if (options.max_entries_per_tensor != 0 && order.size() > options.max_entries_per_tensor) {
      rng.shuffle(order);
      order.resize(options.max_entries_per_tensor);
    }
    for (std::size_t idx : order) {
      const double analytic = t.grad ? (*t.grad)[idx] : 0.0;
      const double saved = t.data[idx];
      auto at = [&](double offset) {
        t.data[idx] = saved + offset;
        return evaluate();
      };
      const double h = options.step;
      double numeric;
      if (options.five_point) {
        numeric = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12.0 * h);
      } else {
        numeric = (at(h) - at(-h)) / (2.0 * h);
      }
      t.data[idx] = saved;
      const double err = rel_error(analytic, numeric, options.floor);
      ++report.entries_checked;
      if (err > report.max_rel_error || report.entries_checked == 1) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        if (err >= report.max_rel_error) {
          report.worst_tensor = p.name;
          report.worst_index = idx;
          report.worst_analytic = analytic;
          report.worst_numeric = numeric;
        }
      }
    }
  }
  return report;
}

}  // namespace mmgpt::nn
