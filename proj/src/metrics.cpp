#include "ctn/metrics.hpp"

#include <stdexcept>
#include <string>

namespace ctn {

Metrics compute_metrics(std::span<const std::size_t> labels, std::span<const std::size_t> predicted,
                        std::size_t classes) {
  if (labels.size() != predicted.size()) {
    throw std::invalid_argument("compute_metrics: " + std::to_string(labels.size()) + " labels vs " +
                                std::to_string(predicted.size()) + " predictions");
  }
  Metrics m;
  m.classes = classes;
  m.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  m.correct.assign(classes, 0);
  m.total.assign(classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes || predicted[i] >= classes) {
      throw std::out_of_range("compute_metrics: class id outside [0, " + std::to_string(classes) + ")");
    }
    ++m.confusion[labels[i]][predicted[i]];
    ++m.total[labels[i]];
    if (labels[i] == predicted[i]) ++m.correct[labels[i]];
  }
  std::size_t hits = 0, seen = 0, present = 0;
  double acc_sum = 0.0;
  for (std::size_t c = 0; c < classes; ++c) {
    hits += m.correct[c];
    seen += m.total[c];
    if (m.total[c] > 0) {
      acc_sum += static_cast<double>(m.correct[c]) / static_cast<double>(m.total[c]);
      ++present;
    }
  }
  m.overall_accuracy = seen ? static_cast<double>(hits) / static_cast<double>(seen) : 0.0;
  m.mean_accuracy = present ? acc_sum / static_cast<double>(present) : 0.0;
  return m;
}

}  // namespace ctn
