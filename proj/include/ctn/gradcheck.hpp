#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ctn/tensor.hpp"

namespace ctn {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t entries = 0;   // number of scalar inputs perturbed
  std::size_t worst_input = 0;
  std::size_t worst_entry = 0;
  bool passed = false;
};

using ScalarFn = std::function<Tensor<double>()>;

/// Compares reverse-mode gradients of f against central finite differences
/// for every entry of every input. f must read the inputs through shared
/// handles (the entries are perturbed in place) and return a scalar.
///
/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-4);
/// the floor keeps near-zero gradients from amplifying round-off.
GradCheckReport grad_check(const ScalarFn& f, std::vector<Tensor<double>> inputs,
                           double tolerance = 1e-4, double step = 1e-5);

}  // namespace ctn
