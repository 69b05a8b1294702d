#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace ctn {

/// Classification scores: overall accuracy T / N and the mean of per-class
/// accuracies over classes that occur at least once.
struct Metrics {
  std::size_t classes = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<std::size_t> correct;
  std::vector<std::size_t> total;
  double mean_accuracy = 0.0;
  double overall_accuracy = 0.0;
};

Metrics compute_metrics(std::span<const std::size_t> labels, std::span<const std::size_t> predicted,
                        std::size_t classes);

}  // namespace ctn
