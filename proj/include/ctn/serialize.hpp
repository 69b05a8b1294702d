#pragma once

// JSON forms of the configuration and result types.

#include <filesystem>
#include <string>

#include "json.hpp"

#include "ctn/metrics.hpp"
#include "ctn/network.hpp"
#include "ctn/train.hpp"

namespace ctn {

/// Where a run gets its data: manifests written by `synth` (or by hand), or
/// an in-memory synthetic set when no manifest is given.
struct DataSpec {
  std::string train_manifest;
  std::string test_manifest;
  std::size_t classes = 8;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 25;
  double noise = 0.01;
  std::uint64_t seed = 1;  // synthetic data and manifest resampling; independent of the model seed
};

/// Everything a `train` run needs; echoed to the run directory.
struct RunConfig {
  ModelOptions model;
  TrainConfig train;
  DataSpec data;
  std::string out = "run";
  std::uint64_t seed = 0;  // model initialization and batch shuffling
  double stop_train_acc = 0.0;  // stop early once both thresholds are met (0 disables)
  double stop_test_acc = 0.0;
};

void to_json(nlohmann::json& j, const ModelOptions& o);
void from_json(const nlohmann::json& j, ModelOptions& o);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const DataSpec& d);
void from_json(const nlohmann::json& j, DataSpec& d);
void to_json(nlohmann::json& j, const RunConfig& r);
void from_json(const nlohmann::json& j, RunConfig& r);
void to_json(nlohmann::json& j, const Metrics& m);
void to_json(nlohmann::json& j, const EpochLog& log);

/// Reads a JSON file; throws std::runtime_error naming the file on failure.
nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace ctn
