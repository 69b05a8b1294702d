#pragma once

// Single-document JSON checkpoints. Tensors are stored as base64 of their
// little-endian float32 bytes, so a round trip is bit-exact.

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ctn/network.hpp"
#include "ctn/train.hpp"

namespace ctn {

struct StoredTensor {
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<std::string> class_names;
  TrainConfig train;
  TrainState state;
  std::map<std::string, StoredTensor> params;
  std::map<std::string, BatchNormState<float>> norms;
};

Checkpoint make_checkpoint(const Model<float>& model, std::vector<std::string> class_names,
                           const TrainConfig& train, const TrainState& state);

/// Rebuilds the model and copies every stored tensor in; throws
/// std::runtime_error when names or shapes disagree with the config.
Model<float> restore_model(const Checkpoint& checkpoint);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string base64_encode(std::span<const float> values);
std::vector<float> base64_decode(const std::string& text);

}  // namespace ctn
