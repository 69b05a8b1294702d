#pragma once

#include <cstddef>

#include "ctn/network.hpp"

namespace ctn {

/// Closed-form model size and per-sample forward cost.
///
/// Parameters count every weight, bias and batchnorm scale/shift (running
/// statistics excluded). Multiply-accumulates cover linear layers as
/// written (tau's first layer over all S*S pairs), the S*S attention maps
/// and products, and the value aggregation; FLOPs are reported as 2 x MACs.
struct Costs {
  std::size_t parameters = 0;
  std::size_t macs = 0;

  double flops() const { return 2.0 * static_cast<double>(macs); }
};

Costs count_costs(const ModelConfig& config);

}  // namespace ctn
