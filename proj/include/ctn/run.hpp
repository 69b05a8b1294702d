#pragma once

// A complete training run as the CLI performs it: data, model, training,
// and the run directory (config.json, log.csv, checkpoint.json, metrics.json).

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "ctn/checkpoint.hpp"
#include "ctn/serialize.hpp"

namespace ctn {

struct RunData {
  Dataset train;
  Dataset test;
};

/// Manifests when given (resampled to points, seeded by spec.seed), otherwise
/// the synthetic shape classes generated in memory.
RunData load_run_data(const DataSpec& spec, std::size_t points);
Dataset load_test_data(const DataSpec& spec, std::size_t points);

struct RunOutcome {
  TrainResult result;
  Metrics test;
  std::vector<std::string> class_names;
  std::filesystem::path dir;
};

/// Resolves the class count from the data, trains, and writes the run
/// directory. Progress lines go to progress when given. With resume set the
/// model, optimizer and shuffle stream continue from the checkpoint.
RunOutcome run_training(RunConfig config, std::ostream* progress = nullptr, const Checkpoint* resume = nullptr);

}  // namespace ctn
