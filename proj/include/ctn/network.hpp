#pragma once

// The classifier: two LFA+GFL modules on farthest-point-sampled subsets
// (N/4 then N/16 centers), a pointwise LBR lifting features to 1024
// channels, global max pooling, and an MLP head.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ctn/attention.hpp"
#include "ctn/layers.hpp"
#include "ctn/lfa.hpp"
#include "ctn/pointcloud.hpp"
#include "ctn/tensor.hpp"

namespace ctn {

struct ModuleConfig {
  std::size_t samples = 0;
  LfaConfig lfa;
  AttentionConfig attention;  // width must equal lfa.output_width()
  bool lfa_enabled = true;
  bool gfl_enabled = true;
};

struct ModelConfig {
  std::size_t points = 1024;
  std::size_t classes = 40;
  std::size_t input_features = 3;  // per-point normals
  std::vector<ModuleConfig> modules;
  std::size_t embed_width = 1024;
  std::vector<std::size_t> head_widths{512, 256};

  /// Throws std::invalid_argument on inconsistent sizes.
  void validate() const;
};

/// The ablation switches exposed on the command line.
struct ModelOptions {
  std::size_t points = 1024;
  std::size_t classes = 40;
  std::size_t scales = 3;  // 1 uses the middle scale only
  Mechanism mechanism = Mechanism::offset;
  Operator op = Operator::subtraction;
  bool position_encoding = true;
  bool hierarchy = true;  // false keeps all N points in both modules
  bool lfa = true;
  bool gfl = true;
};

/// Default architecture: module 1 radii {0.1, 0.2, 0.4}, module 2 radii
/// {0.2, 0.4, 0.8}, K {8, 16, 32}; edge-conv widths 64 and 192 per scale.
ModelConfig make_model_config(const ModelOptions& options);

template <typename T>
struct ForwardResult {
  Tensor<T> logits;          // (B, C)
  Tensor<T> point_features;  // (B, S_last, embed_width) before global pooling
  BatchPositions centers;    // last module's sampled positions
};

template <typename T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  /// Clouds must carry exactly config().points points with normals.
  ForwardResult<T> forward(std::span<const PointCloud* const> batch, Mode mode) const;
  Tensor<T> logits(std::span<const PointCloud* const> batch, Mode mode) const {
    return forward(batch, mode).logits;
  }

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }

 private:
  ModelConfig config_;
  ParamStore<T> store_;
  std::vector<LfaBlock<T>> lfa_;
  std::vector<std::optional<GflBlock<T>>> gfl_;
  Lbr<T> embed_;
  std::vector<Lbr<T>> head_;
  Linear<T> classifier_;
};

/// Mean softmax cross-entropy.
template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  return cross_entropy(logits, labels);
}

/// Row-wise argmax (lowest index on ties).
template <typename T>
std::vector<std::size_t> predictions(const Tensor<T>& logits);

}  // namespace ctn
