#include "ctn/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace ctn {

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0) throw std::invalid_argument("train config: epochs and batch size must be positive");
  if (!(lr > 0) || !(momentum >= 0) || !(weight_decay >= 0)) {
    throw std::invalid_argument("train config: lr must be positive, momentum and weight decay non-negative");
  }
}

double cosine_lr(double lr0, std::size_t epoch, std::size_t epochs) {
  const double t = static_cast<double>(std::min(epoch, epochs)) / static_cast<double>(epochs);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

template <typename T>
void Sgd<T>::step(ParamStore<T>& store, double lr) {
  const T mu = static_cast<T>(momentum_), wd = static_cast<T>(weight_decay_), rate = static_cast<T>(lr);
  for (auto& [name, param] : store.params()) {
    const auto& g = param.grad();
    if (g.empty()) continue;
    auto& v = velocity_[name];
    if (v.empty()) v.assign(param.size(), T(0));
    T* w = param.mutable_data().data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = mu * v[i] + (g[i] + wd * w[i]);
      w[i] -= rate * v[i];
    }
  }
}

template class Sgd<float>;
template class Sgd<double>;

std::string csv_header() { return "epoch,lr,train_loss,train_acc,test_mAcc,test_OA"; }

std::string csv_row(const EpochLog& log) {
  std::ostringstream out;
  out.precision(17);
  out << log.epoch << ',' << log.lr << ',' << log.train_loss << ',' << log.train_acc << ',' << log.test_macc << ','
      << log.test_oa;
  return out.str();
}

namespace {

std::vector<const PointCloud*> batch_of(const Dataset& data, std::span<const std::size_t> order) {
  std::vector<const PointCloud*> out;
  for (std::size_t i : order) out.push_back(&data.clouds[i]);
  return out;
}

std::size_t label_of(const PointCloud& cloud, std::size_t classes) {
  if (!cloud.label) throw std::invalid_argument("dataset cloud without a label");
  if (*cloud.label >= classes) {
    throw std::invalid_argument("label " + std::to_string(*cloud.label) + " outside " + std::to_string(classes) +
                                " classes");
  }
  return *cloud.label;
}

}  // namespace

TrainResult train(Model<float>& model, const Dataset& train_set, const Dataset* test_set, const TrainConfig& config,
                  const EpochCallback& on_epoch, const TrainState* resume) {
  config.validate();
  if (train_set.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (config.batch_size > train_set.size()) {
    throw std::invalid_argument("train: batch size " + std::to_string(config.batch_size) + " exceeds " +
                                std::to_string(train_set.size()) + " samples");
  }
  const std::size_t classes = model.config().classes;
  std::vector<std::size_t> labels;
  for (const auto& cloud : train_set.clouds) labels.push_back(label_of(cloud, classes));

  TrainResult result;
  Sgd<float> sgd(config.momentum, config.weight_decay);
  Rng shuffle(config.seed);
  std::size_t start = 0;
  if (resume) {
    start = resume->epoch;
    sgd.velocity() = resume->velocity;
    std::istringstream(resume->rng_state) >> shuffle;
  }
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = start; epoch < config.epochs; ++epoch) {
    const double lr = cosine_lr(config.lr, epoch, config.epochs);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle);
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0, batch_index = 0;
    for (std::size_t at = 0; at < order.size(); at += config.batch_size, ++batch_index) {
      const std::size_t count = std::min(config.batch_size, order.size() - at);
      if (count < 2) continue;
      const std::span<const std::size_t> ids(order.data() + at, count);
      const auto batch = batch_of(train_set, ids);
      std::vector<std::size_t> batch_labels;
      for (std::size_t i : ids) batch_labels.push_back(labels[i]);

      model.store().zero_grad();
      const Tensor<float> logits = model.logits(batch, Mode::train);
      const Tensor<float> loss = classification_loss(logits, std::span<const std::size_t>(batch_labels));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                                 std::to_string(batch_index + 1),
                             epoch + 1, batch_index + 1);
      }
      loss.backward();
      sgd.step(model.store(), lr);

      const auto predicted = predictions(logits);
      for (std::size_t b = 0; b < count; ++b) correct += predicted[b] == batch_labels[b];
      loss_sum += value * static_cast<double>(count);
      seen += count;
    }
    EpochLog log;
    log.epoch = epoch + 1;
    log.lr = lr;
    log.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    log.train_acc = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    if (test_set && test_set->size()) {
      const Metrics m = evaluate(model, *test_set, config.batch_size);
      log.test_macc = m.mean_accuracy;
      log.test_oa = m.overall_accuracy;
    }
    result.logs.push_back(log);
    result.state.epoch = epoch + 1;
    if (on_epoch && !on_epoch(log)) break;
  }
  model.store().zero_grad();
  result.state.seed = config.seed;
  std::ostringstream rng_text;
  rng_text << shuffle;
  result.state.rng_state = rng_text.str();
  result.state.velocity = sgd.velocity();
  if (resume && result.logs.empty()) result.state.epoch = resume->epoch;
  return result;
}

std::vector<std::size_t> predict(const Model<float>& model, const Dataset& dataset, std::size_t batch_size) {
  NoGradGuard no_grad;
  std::vector<std::size_t> out;
  std::vector<std::size_t> ids(dataset.size());
  std::iota(ids.begin(), ids.end(), 0);
  for (std::size_t at = 0; at < ids.size(); at += batch_size) {
    const std::size_t count = std::min(batch_size, ids.size() - at);
    const auto batch = batch_of(dataset, std::span<const std::size_t>(ids.data() + at, count));
    const auto p = predictions(model.logits(batch, Mode::eval));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

Metrics evaluate(const Model<float>& model, const Dataset& dataset, std::size_t batch_size) {
  const std::size_t classes = model.config().classes;
  std::vector<std::size_t> labels;
  for (const auto& cloud : dataset.clouds) labels.push_back(label_of(cloud, classes));
  const auto predicted = predict(model, dataset, batch_size);
  return compute_metrics(labels, predicted, classes);
}

}  // namespace ctn
