#include "decomposeme/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "decomposeme/error.hpp"

namespace decomposeme {

double relative_error(double a, double b) {
  return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

GradCheckReport grad_check_report(const ScalarFunction& f, const Tensor& x,
                                  double eps) {
  if (!f.value || !f.gradient) {
    throw InputError("grad_check: function needs both value and gradient");
  }
  const Tensor analytic = f.gradient(x);
  if (!(analytic.shape() == x.shape())) {
    throw DimensionError("grad_check: gradient shape " +
                         to_string(analytic.shape()) + " differs from input " +
                         to_string(x.shape()));
  }
  std::vector<std::uint32_t> base_region;
  if (f.region) base_region = f.region(x);

  GradCheckReport report;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float orig = x[i];
    probe[i] = static_cast<float>(orig + eps);
    const double up = f.value(probe);
    const bool up_ok = !f.region || f.region(probe) == base_region;
    // The perturbation actually applied after rounding to f32.
    const double hi = probe[i];
    probe[i] = static_cast<float>(orig - eps);
    const double down = f.value(probe);
    const bool down_ok = !f.region || f.region(probe) == base_region;
    const double lo = probe[i];
    probe[i] = orig;
    if (!up_ok || !down_ok) {
      ++report.skipped;
      continue;
    }
    const double numeric = (up - down) / (hi - lo);
    report.max_relative_error =
        std::max(report.max_relative_error, relative_error(numeric, analytic[i]));
    ++report.checked;
  }
  return report;
}

}  // namespace decomposeme
