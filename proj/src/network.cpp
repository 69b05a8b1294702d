#include "ctn/network.hpp"

#include <stdexcept>
#include <string>

namespace ctn {

void ModelConfig::validate() const {
  if (points == 0 || classes == 0 || input_features == 0) {
    throw std::invalid_argument("model config: points, classes and input features must be positive");
  }
  if (modules.empty()) throw std::invalid_argument("model config: at least one module required");
  std::size_t available = points;
  std::size_t width = input_features;
  for (std::size_t m = 0; m < modules.size(); ++m) {
    const auto& mod = modules[m];
    const std::string where = "model config: module " + std::to_string(m + 1);
    if (mod.samples == 0 || mod.samples > available) {
      throw std::invalid_argument(where + " samples " + std::to_string(mod.samples) + " of " +
                                  std::to_string(available) + " points");
    }
    mod.lfa.validate();
    if (mod.gfl_enabled && mod.attention.width != mod.lfa.output_width()) {
      throw std::invalid_argument(where + " attention width " + std::to_string(mod.attention.width) +
                                  " differs from LFA output " + std::to_string(mod.lfa.output_width()));
    }
    available = mod.samples;
    width = mod.lfa.output_width();
  }
  if (embed_width == 0 || width == 0) throw std::invalid_argument("model config: widths must be positive");
  for (std::size_t w : head_widths) {
    if (w == 0) throw std::invalid_argument("model config: head widths must be positive");
  }
}

ModelConfig make_model_config(const ModelOptions& options) {
  if (options.scales != 1 && options.scales != 3) {
    throw std::invalid_argument("scales must be 1 or 3, got " + std::to_string(options.scales));
  }
  if (options.hierarchy && (options.points < 16 || options.points % 16 != 0)) {
    throw std::invalid_argument("point count must be a positive multiple of 16 for the N/4, N/16 hierarchy, got " +
                                std::to_string(options.points));
  }
  ModelConfig config;
  config.points = options.points;
  config.classes = options.classes;
  const std::size_t s1 = options.hierarchy ? options.points / 4 : options.points;
  const std::size_t s2 = options.hierarchy ? options.points / 16 : options.points;

  auto make_module = [&](std::size_t samples, std::vector<GroupingScale> scales, std::size_t width) {
    ModuleConfig mod;
    mod.samples = samples;
    if (options.scales == 1) scales = {scales[1]};
    mod.lfa.grouping.scales = scales;
    mod.lfa.widths.assign(scales.size(), {width});
    mod.lfa_enabled = options.lfa;
    mod.gfl_enabled = options.gfl;
    mod.attention.mechanism = options.mechanism;
    mod.attention.op = options.op;
    mod.attention.position_encoding = options.position_encoding;
    mod.attention.width = mod.lfa.output_width();
    return mod;
  };
  config.modules.push_back(make_module(s1, {{0.1, 8}, {0.2, 16}, {0.4, 32}}, 64));
  config.modules.push_back(make_module(s2, {{0.2, 8}, {0.4, 16}, {0.8, 32}}, 192));
  config.validate();
  return config;
}

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(seed);
  std::size_t width = config_.input_features;
  for (std::size_t m = 0; m < config_.modules.size(); ++m) {
    const auto& mod = config_.modules[m];
    const std::string prefix = "module" + std::to_string(m + 1);
    lfa_.emplace_back(store_, prefix + ".lfa", width, mod.lfa, mod.lfa_enabled, rng);
    if (mod.gfl_enabled) {
      gfl_.emplace_back(std::in_place, store_, prefix + ".gfl", mod.attention, rng);
    } else {
      gfl_.emplace_back(std::nullopt);
    }
    width = mod.lfa.output_width();
  }
  embed_ = Lbr<T>::create(store_, "embed", width, config_.embed_width, rng);
  width = config_.embed_width;
  for (std::size_t h = 0; h < config_.head_widths.size(); ++h) {
    head_.push_back(Lbr<T>::create(store_, "head" + std::to_string(h), width, config_.head_widths[h], rng));
    width = config_.head_widths[h];
  }
  classifier_ = Linear<T>::create(store_, "classifier", width, config_.classes, true, rng);
}

template <typename T>
ForwardResult<T> Model<T>::forward(std::span<const PointCloud* const> batch, Mode mode) const {
  if (batch.empty()) throw std::invalid_argument("forward: empty batch");
  const std::size_t n = config_.points;
  BatchPositions positions;
  std::vector<T> normals;
  normals.reserve(batch.size() * n * 3);
  for (const PointCloud* cloud : batch) {
    if (cloud->size() != n || cloud->normals.size() != n) {
      throw DimensionError("forward: model expects " + std::to_string(n) + " points with normals, got " +
                           std::to_string(cloud->size()));
    }
    positions.push_back(cloud->positions);
    for (const auto& nv : cloud->normals) {
      for (double c : nv) normals.push_back(static_cast<T>(c));
    }
  }
  Tensor<T> features({batch.size(), n, 3}, std::move(normals));
  for (std::size_t m = 0; m < config_.modules.size(); ++m) {
    LocalFeatures<T> local = lfa_[m].forward(features, positions, config_.modules[m].samples, mode);
    features = gfl_[m] ? gfl_[m]->forward(local.features, positions_tensor<T>(local.positions), mode)
                       : local.features;
    positions = std::move(local.positions);
  }
  ForwardResult<T> out;
  out.point_features = embed_(features, mode);
  Tensor<T> h = max_reduce(out.point_features, 1).values;
  for (const auto& layer : head_) h = layer(h, mode);
  out.logits = classifier_(h);
  out.centers = std::move(positions);
  return out;
}

template <typename T>
std::vector<std::size_t> predictions(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw DimensionError("predictions: expected (B, C) logits");
  const std::size_t classes = logits.dim(1);
  std::vector<std::size_t> out;
  for (std::size_t b = 0; b < logits.dim(0); ++b) {
    const T* row = logits.data().data() + b * classes;
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (row[c] > row[best]) best = c;
    }
    out.push_back(best);
  }
  return out;
}

template class Model<float>;
template class Model<double>;
template std::vector<std::size_t> predictions(const Tensor<float>&);
template std::vector<std::size_t> predictions(const Tensor<double>&);

}  // namespace ctn
