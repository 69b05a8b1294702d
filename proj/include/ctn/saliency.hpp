#pragma once

// Gradient x activation attribution of one class logit onto input points.

#include <cstddef>
#include <vector>

#include "ctn/network.hpp"

namespace ctn {

struct SaliencyResult {
  std::size_t target = 0;
  std::vector<double> center_scores;  // per last-module center, unnormalized
  std::vector<Vec3> centers;
  std::vector<double> scores;  // per input point, in [0, 1]
  bool degenerate = false;     // no usable signal: all scores zero or features constant
};

/// score_i = ReLU(sum_c dlogit_target/df_ic * f_ic) over the pre-pool
/// features f at the last module's centers; every input point takes the
/// score of its nearest center (lowest index on ties), then scores are
/// divided by their maximum. Runs in eval mode and leaves no gradients on
/// the parameters.
SaliencyResult saliency(Model<float>& model, const PointCloud& cloud, std::size_t target);

}  // namespace ctn
