#include "ctn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ctn {

GradCheckReport grad_check(const ScalarFn& f, std::vector<Tensor<double>> inputs,
                           double tolerance, double step) {
  for (auto& input : inputs) {
    input.set_requires_grad(true);
    input.zero_grad();
  }
  const Tensor<double> out = f();
  if (out.size() != 1) {
    throw DimensionError("grad_check: function must return a scalar, got " + shape_str(out.shape()));
  }
  out.backward();

  GradCheckReport report;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto values = inputs[t].mutable_data();
    const auto grad = inputs[t].grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double analytic = grad.empty() ? 0.0 : grad[i];
      const double saved = values[i];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard guard;
        values[i] = saved + step;
        plus = f().item();
        values[i] = saved - step;
        minus = f().item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
      const double err = std::abs(analytic - numeric) / denom;
      if (std::isnan(err)) {
        report.max_rel_error = std::numeric_limits<double>::infinity();
        report.worst_input = t;
        report.worst_entry = i;
      } else if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_input = t;
        report.worst_entry = i;
      }
      ++report.entries;
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

}  // namespace ctn
