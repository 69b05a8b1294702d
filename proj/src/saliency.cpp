#include "ctn/saliency.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace ctn {

SaliencyResult saliency(Model<float>& model, const PointCloud& cloud, std::size_t target) {
  const std::size_t classes = model.config().classes;
  if (target >= classes) {
    throw std::invalid_argument("saliency: class " + std::to_string(target) + " outside " + std::to_string(classes));
  }
  model.store().zero_grad();
  const PointCloud* batch[] = {&cloud};
  const ForwardResult<float> fwd = model.forward(batch, Mode::eval);
  std::vector<float> seed(classes, 0.0f);
  seed[target] = 1.0f;
  fwd.logits.backward(seed);

  SaliencyResult out;
  out.target = target;
  out.centers = fwd.centers.front();
  const Tensor<float>& f = fwd.point_features;
  const std::size_t s = f.dim(1), d = f.dim(2);
  const auto values = f.data();
  const auto& grads = f.grad();
  bool constant = true;
  for (std::size_t i = 0; i < s; ++i) {
    double total = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t k = i * d + c;
      if (!grads.empty()) total += static_cast<double>(grads[k]) * static_cast<double>(values[k]);
      constant = constant && values[k] == values[c];
    }
    out.center_scores.push_back(std::max(total, 0.0));
  }
  model.store().zero_grad();

  out.scores.resize(cloud.size());
  for (std::size_t p = 0; p < cloud.size(); ++p) {
    std::size_t best = 0;
    double best_dist = 0.0;
    for (std::size_t i = 0; i < s; ++i) {
      double dist = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double delta = cloud.positions[p][a] - out.centers[i][a];
        dist += delta * delta;
      }
      if (i == 0 || dist < best_dist) {
        best = i;
        best_dist = dist;
      }
    }
    out.scores[p] = out.center_scores[best];
  }
  const double peak = out.scores.empty() ? 0.0 : *std::max_element(out.scores.begin(), out.scores.end());
  out.degenerate = constant || !(peak > 1e-12);
  if (!out.degenerate) {
    for (double& v : out.scores) v /= peak;
  } else {
    std::fill(out.scores.begin(), out.scores.end(), 0.0);
  }
  return out;
}

}  // namespace ctn
