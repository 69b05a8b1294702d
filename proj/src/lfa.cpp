#include "ctn/lfa.hpp"

#include <numeric>
#include <stdexcept>

namespace ctn {

std::size_t LfaConfig::output_width() const {
  std::size_t total = 0;
  for (const auto& w : widths) total += w.empty() ? 0 : w.back();
  return total;
}

void LfaConfig::validate() const {
  grouping.validate();
  if (widths.size() != grouping.scales.size()) {
    throw std::invalid_argument("LFA config: " + std::to_string(widths.size()) + " width lists for " +
                                std::to_string(grouping.scales.size()) + " scales");
  }
  for (const auto& list : widths) {
    if (list.empty()) throw std::invalid_argument("LFA config: empty width list");
    for (std::size_t w : list) {
      if (w == 0) throw std::invalid_argument("LFA config: widths must be positive");
    }
  }
}

template <typename T>
Tensor<T> positions_tensor(const BatchPositions& positions) {
  if (positions.empty() || positions.front().empty()) throw DimensionError("positions_tensor: empty batch");
  const std::size_t n = positions.front().size();
  std::vector<T> values;
  values.reserve(positions.size() * n * 3);
  for (const auto& cloud : positions) {
    if (cloud.size() != n) throw DimensionError("positions_tensor: ragged batch");
    for (const auto& p : cloud) {
      for (double c : p) values.push_back(static_cast<T>(c));
    }
  }
  return Tensor<T>({positions.size(), n, 3}, std::move(values));
}

template <typename T>
Tensor<T> context_fuse(const Tensor<T>& center_features, const Tensor<T>& center_positions,
                       const Tensor<T>& neighbor_features) {
  const std::size_t r = neighbor_features.rank();
  if (r < 2 || center_features.rank() != r || center_positions.rank() != r ||
      center_features.shape().back() != neighbor_features.shape().back() ||
      center_positions.shape().back() != 3) {
    throw DimensionError("context_fuse: center " + shape_str(center_features.shape()) + " / " +
                         shape_str(center_positions.shape()) + " against neighbours " +
                         shape_str(neighbor_features.shape()));
  }
  Shape context_shape = neighbor_features.shape();
  context_shape.back() = center_features.shape().back() + 3;
  const Tensor<T> center_context = concat<T>({center_features, center_positions}, r - 1);
  return concat<T>({sub(neighbor_features, center_features), broadcast_to(center_context, context_shape)},
                   r - 1);
}

template <typename T>
Tensor<T> group_points(const Tensor<T>& x, std::span<const std::size_t> index, std::size_t batch,
                       std::size_t centers, std::size_t members) {
  if (x.rank() != 3 || x.dim(0) != batch || index.size() != batch * centers * members) {
    throw DimensionError("group_points: input " + shape_str(x.shape()) + " with " +
                         std::to_string(index.size()) + " indices");
  }
  const std::size_t n = x.dim(1), c = x.dim(2);
  std::vector<std::size_t> flat(index.size());
  const std::size_t per_batch = centers * members;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw std::out_of_range("group_points: index outside cloud");
    flat[i] = (i / per_batch) * n + index[i];
  }
  const Tensor<T> rows = gather(reshape(x, {batch * n, c}), std::span<const std::size_t>(flat), 0);
  return reshape(rows, {batch, centers, members, c});
}

template <typename T>
Tensor<T> edge_conv(const Tensor<T>& edges, const std::vector<Lbr<T>>& layers, Mode mode) {
  Tensor<T> h = edges;
  for (const auto& layer : layers) {
    if (h.shape().back() != layer.fc.in()) {
      throw DimensionError("edge_conv: edge width " + std::to_string(h.shape().back()) +
                           " against layer input " + std::to_string(layer.fc.in()));
    }
    h = layer(h, mode);
  }
  return h;
}

template <typename T>
Tensor<T> local_maxpool(const Tensor<T>& edge_features) {
  if (edge_features.rank() < 2) throw DimensionError("local_maxpool: need a neighbour axis");
  return max_reduce(edge_features, edge_features.rank() - 2).values;
}

template <typename T>
LfaBlock<T>::LfaBlock(ParamStore<T>& store, const std::string& prefix, std::size_t in_features,
                      LfaConfig config, bool enabled, Rng& rng)
    : config_(std::move(config)), in_features_(in_features), enabled_(enabled) {
  config_.validate();
  for (std::size_t s = 0; s < config_.widths.size(); ++s) {
    const std::string base = prefix + ".scale" + std::to_string(s);
    std::vector<Lbr<T>> stack;
    std::size_t width = enabled_ ? 2 * in_features_ + 3 : in_features_ + 3;
    for (std::size_t l = 0; l < config_.widths[s].size(); ++l) {
      stack.push_back(Lbr<T>::create(store, base + ".conv" + std::to_string(l), width, config_.widths[s][l], rng));
      width = config_.widths[s][l];
    }
    layers_.push_back(std::move(stack));
  }
}

template <typename T>
Tensor<T> LfaBlock<T>::scale_forward(const Tensor<T>& features, const Tensor<T>& center_features,
                                     const Tensor<T>& center_positions, const std::vector<std::size_t>& index,
                                     std::size_t batch, std::size_t centers, std::size_t scale,
                                     Mode mode) const {
  const std::size_t d = in_features_;
  const std::size_t members = config_.grouping.scales[scale].members;
  const auto& stack = layers_[scale];
  // First layer factored through the concat: W [F_j - F_i; F_i; P_i] + b
  // = W_a F_j + (W_b - W_a) F_i + W_c P_i + b, so the neighbour term is
  // projected once per point instead of once per edge.
  const Lbr<T>& first = stack.front();
  const Tensor<T> w_diff = slice(first.fc.weight, 0, 0, d);
  const Tensor<T> w_center = slice(first.fc.weight, 0, d, d);
  const Tensor<T> w_pos = slice(first.fc.weight, 0, 2 * d, 3);
  const Tensor<T> neighbor = group_points(linear(features, w_diff, Tensor<T>()),
                                          std::span<const std::size_t>(index), batch, centers, members);
  const Tensor<T> center = add(linear(center_features, sub(w_center, w_diff), Tensor<T>()),
                               linear(center_positions, w_pos, first.fc.bias));
  Tensor<T> h = relu(first.bn(add(neighbor, center), mode));
  for (std::size_t l = 1; l < stack.size(); ++l) h = stack[l](h, mode);
  return local_maxpool(h);
}

template <typename T>
LocalFeatures<T> LfaBlock<T>::forward(const Tensor<T>& features, const BatchPositions& positions,
                                      std::size_t samples, Mode mode) const {
  const std::size_t batch = positions.size();
  if (features.rank() != 3 || features.dim(0) != batch || features.dim(2) != in_features_) {
    throw DimensionError("LFA block: features " + shape_str(features.shape()) + " for batch of " +
                         std::to_string(batch) + " with " + std::to_string(in_features_) + " channels");
  }
  const std::size_t n = features.dim(1);
  LocalFeatures<T> out;
  std::vector<std::size_t> center_flat;
  for (const auto& cloud : positions) {
    if (cloud.size() != n) throw DimensionError("LFA block: positions do not match feature rows");
    auto picked = farthest_point_sample(cloud, samples);
    std::vector<Vec3> sampled;
    for (std::size_t i : picked) sampled.push_back(cloud[i]);
    center_flat.insert(center_flat.end(), picked.begin(), picked.end());
    out.positions.push_back(std::move(sampled));
    out.center_index.push_back(std::move(picked));
  }
  const Tensor<T> center_features =
      group_points(features, std::span<const std::size_t>(center_flat), batch, samples, 1);
  const Tensor<T> center_positions = reshape(positions_tensor<T>(out.positions), {batch, samples, 1, 3});

  std::vector<Tensor<T>> per_scale;
  for (std::size_t s = 0; s < layers_.size(); ++s) {
    if (!enabled_) {
      Tensor<T> h = concat<T>({center_features, center_positions}, 3);
      for (const auto& layer : layers_[s]) h = layer(h, mode);
      per_scale.push_back(reshape(h, {batch, samples, h.shape().back()}));
      continue;
    }
    const auto& scale = config_.grouping.scales[s];
    std::vector<std::size_t> index;
    index.reserve(batch * samples * scale.members);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto groups = ball_query(positions[b], out.center_index[b], scale.radius, scale.members);
      index.insert(index.end(), groups.index.begin(), groups.index.end());
    }
    per_scale.push_back(
        scale_forward(features, center_features, center_positions, index, batch, samples, s, mode));
  }
  out.features = per_scale.size() == 1 ? per_scale.front() : concat(per_scale, 2);
  return out;
}

template <typename T>
Tensor<T> LfaBlock<T>::scale_reference(const Tensor<T>& features, const BatchPositions& positions,
                                       const std::vector<std::vector<std::size_t>>& centers,
                                       std::size_t scale, Mode mode) const {
  const std::size_t batch = positions.size();
  const std::size_t samples = centers.front().size();
  const auto& spec = config_.grouping.scales.at(scale);
  std::vector<std::size_t> index, center_flat;
  BatchPositions sampled(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto groups = ball_query(positions[b], centers[b], spec.radius, spec.members);
    index.insert(index.end(), groups.index.begin(), groups.index.end());
    center_flat.insert(center_flat.end(), centers[b].begin(), centers[b].end());
    for (std::size_t i : centers[b]) sampled[b].push_back(positions[b][i]);
  }
  const Tensor<T> neighbors = group_points(features, std::span<const std::size_t>(index), batch, samples, spec.members);
  const Tensor<T> center_features =
      group_points(features, std::span<const std::size_t>(center_flat), batch, samples, 1);
  const Tensor<T> center_positions = reshape(positions_tensor<T>(sampled), {batch, samples, 1, 3});
  return local_maxpool(edge_conv(context_fuse(center_features, center_positions, neighbors), layers_[scale], mode));
}

#define CTN_INSTANTIATE(T)                                                                          \
  template Tensor<T> positions_tensor<T>(const BatchPositions&);                                    \
  template Tensor<T> context_fuse(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> group_points(const Tensor<T>&, std::span<const std::size_t>, std::size_t,      \
                                  std::size_t, std::size_t);                                        \
  template Tensor<T> edge_conv(const Tensor<T>&, const std::vector<Lbr<T>>&, Mode);                 \
  template Tensor<T> local_maxpool(const Tensor<T>&);                                               \
  template class LfaBlock<T>;

CTN_INSTANTIATE(float)
CTN_INSTANTIATE(double)

#undef CTN_INSTANTIATE

}  // namespace ctn
