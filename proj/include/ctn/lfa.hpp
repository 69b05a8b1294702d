#pragma once

// Local feature aggregation: context fusion of center/neighbour features,
// a shared pointwise edge convolution, max pooling over each neighbourhood,
// and channel concatenation across grouping scales.

#include <cstddef>
#include <string>
#include <vector>

#include "ctn/layers.hpp"
#include "ctn/pointcloud.hpp"
#include "ctn/sampling.hpp"
#include "ctn/tensor.hpp"

namespace ctn {

struct LfaConfig {
  GroupingSpec grouping;
  /// Edge-convolution layer widths for each scale; the last entry of each
  /// list is that scale's output width.
  std::vector<std::vector<std::size_t>> widths;

  std::size_t output_width() const;
  void validate() const;
};

/// Per-batch geometry handed between modules.
using BatchPositions = std::vector<std::vector<Vec3>>;

template <typename T>
struct LocalFeatures {
  Tensor<T> features;                               // (B, S, D)
  BatchPositions positions;                         // B x S sampled centers
  std::vector<std::vector<std::size_t>> center_index;  // B x S indices into the input points
};

/// (B, N, 3) tensor from per-batch coordinates.
template <typename T>
Tensor<T> positions_tensor(const BatchPositions& positions);

/// Edge inputs concat(F_j - F_i, F_i, P_i) with a neighbour axis.
/// center_features (..., 1, D), center_positions (..., 1, 3) and
/// neighbor_features (..., K, D) give (..., K, 2D + 3).
template <typename T>
Tensor<T> context_fuse(const Tensor<T>& center_features, const Tensor<T>& center_positions,
                       const Tensor<T>& neighbor_features);

/// Rows of x (B, N, C) picked per batch by local indices (B * S * K) -> (B, S, K, C).
template <typename T>
Tensor<T> group_points(const Tensor<T>& x, std::span<const std::size_t> index, std::size_t batch,
                       std::size_t centers, std::size_t members);

/// Shared LBR stack applied to every edge independently.
template <typename T>
Tensor<T> edge_conv(const Tensor<T>& edges, const std::vector<Lbr<T>>& layers, Mode mode);

/// Componentwise max over the neighbour axis: (B, S, K, D) -> (B, S, D).
template <typename T>
Tensor<T> local_maxpool(const Tensor<T>& edge_features);

template <typename T>
class LfaBlock {
 public:
  /// enabled = false swaps the neighbourhood machinery for a pointwise LBR
  /// on concat(F_i, P_i) at the sampled centers (ablation switch).
  LfaBlock(ParamStore<T>& store, const std::string& prefix, std::size_t in_features, LfaConfig config,
           bool enabled, Rng& rng);

  /// features (B, N, D) with matching per-batch positions; samples centers by
  /// FPS and aggregates every scale.
  LocalFeatures<T> forward(const Tensor<T>& features, const BatchPositions& positions,
                           std::size_t samples, Mode mode) const;

  /// Same result as forward's per-scale path but built literally from
  /// context_fuse + edge_conv; used to cross-check the factored first layer.
  Tensor<T> scale_reference(const Tensor<T>& features, const BatchPositions& positions,
                            const std::vector<std::vector<std::size_t>>& centers, std::size_t scale,
                            Mode mode) const;

  const LfaConfig& config() const { return config_; }
  std::size_t output_width() const { return config_.output_width(); }

 private:
  Tensor<T> scale_forward(const Tensor<T>& features, const Tensor<T>& center_features,
                          const Tensor<T>& center_positions, const std::vector<std::size_t>& index,
                          std::size_t batch, std::size_t centers, std::size_t scale, Mode mode) const;

  LfaConfig config_;
  std::size_t in_features_;
  bool enabled_;
  std::vector<std::vector<Lbr<T>>> layers_;  // per scale
};

}  // namespace ctn
