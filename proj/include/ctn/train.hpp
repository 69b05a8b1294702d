#pragma once

// SGD with momentum and cosine-annealed learning rate, per-epoch logging
// and evaluation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctn/layers.hpp"
#include "ctn/metrics.hpp"
#include "ctn/network.hpp"
#include "ctn/pointcloud.hpp"

namespace ctn {

struct TrainConfig {
  std::size_t epochs = 250;
  std::size_t batch_size = 16;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;

  void validate() const;
};

/// lr0 * (1 + cos(pi * epoch / epochs)) / 2.
double cosine_lr(double lr0, std::size_t epoch, std::size_t epochs);

/// v = momentum * v + (g + weight_decay * w); w -= lr * v.
template <typename T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(ParamStore<T>& store, double lr);

  std::map<std::string, std::vector<T>>& velocity() { return velocity_; }
  const std::map<std::string, std::vector<T>>& velocity() const { return velocity_; }

 private:
  double momentum_;
  double weight_decay_;
  std::map<std::string, std::vector<T>> velocity_;
};

class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::size_t epoch, std::size_t batch)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;  // running accuracy of the training pass
  double test_macc = 0.0;
  double test_oa = 0.0;
};

std::string csv_header();
std::string csv_row(const EpochLog& log);

/// Everything needed to continue a run: epochs done, the shuffle stream and
/// the momentum buffers.
struct TrainState {
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::string rng_state;
  std::map<std::string, std::vector<float>> velocity;
};

/// Return false to stop after the current epoch.
using EpochCallback = std::function<bool(const EpochLog&)>;

struct TrainResult {
  std::vector<EpochLog> logs;
  TrainState state;
};

/// Trains in place. The test set is optional (pass nullptr). Batches are
/// drawn from a seeded shuffle; a trailing batch of one sample is skipped
/// since batchnorm needs two rows. Throws NumericalError on a non-finite loss.
TrainResult train(Model<float>& model, const Dataset& train_set, const Dataset* test_set,
                  const TrainConfig& config, const EpochCallback& on_epoch = {},
                  const TrainState* resume = nullptr);

/// Eval-mode predictions for every cloud.
std::vector<std::size_t> predict(const Model<float>& model, const Dataset& dataset, std::size_t batch_size = 16);

Metrics evaluate(const Model<float>& model, const Dataset& dataset, std::size_t batch_size = 16);

}  // namespace ctn
