#pragma once

// The finite-difference suite behind `ctn3d gradcheck` and the tests:
// every primitive, every block (edge convolution, LFA, all mechanism and
// operator pairs of the GFL block) and a micro end-to-end model.

#include <cstdint>
#include <string>
#include <vector>

#include "ctn/gradcheck.hpp"

namespace ctn {

struct GradCase {
  std::string scope;
  std::string name;
  double tolerance = 0.0;
  GradCheckReport report;
};

/// scope is "ops", "blocks", "model" or "all"; throws std::invalid_argument otherwise.
std::vector<GradCase> run_grad_suite(const std::string& scope, std::uint64_t seed = 1);

}  // namespace ctn
