#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "decomposeme/tensor.hpp"

namespace decomposeme {

/// A scalar-valued function of one tensor together with its analytic gradient.
/// `region`, when set, returns a signature of the piecewise-linear region the
/// point lies in (ReLU masks, pooling argmaxes); coordinates whose +/- eps
/// probes leave the region are skipped, since central differences are invalid
/// across a kink.
struct ScalarFunction {
  std::function<double(const Tensor&)> value;
  std::function<Tensor(const Tensor&)> gradient;
  std::function<std::vector<std::uint32_t>(const Tensor&)> region;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

/// |a - b| / max(1, |a|, |b|), the error measure used by grad_check.
double relative_error(double a, double b);

/// Central differences on every coordinate of x; returns the worst relative
/// error between numeric and analytic partials.
GradCheckReport grad_check_report(const ScalarFunction& f, const Tensor& x,
                                  double eps);

inline double grad_check(const ScalarFunction& f, const Tensor& x, double eps) {
  return grad_check_report(f, x, eps).max_relative_error;
}

}  // namespace decomposeme
