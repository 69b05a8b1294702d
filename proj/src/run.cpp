#include "ctn/run.hpp"

#include <fstream>
#include <ostream>
#include <stdexcept>

namespace ctn {

namespace {

std::vector<ShapeKind> synthetic_classes(std::size_t count) {
  const auto all = default_shape_classes();
  if (count == 0 || count > all.size()) {
    throw std::invalid_argument("synthetic data has 1 to " + std::to_string(all.size()) + " classes, got " +
                                std::to_string(count));
  }
  return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count)};
}

}  // namespace

Dataset load_test_data(const DataSpec& spec, std::size_t points) {
  if (!spec.test_manifest.empty()) return load_manifest(spec.test_manifest, points, spec.seed);
  if (!spec.train_manifest.empty()) throw std::invalid_argument("a train manifest needs a test manifest too");
  // Test clouds come from their own stream so their count does not shift the training set.
  return synth_dataset(synthetic_classes(spec.classes), spec.test_per_class, points, spec.noise, spec.seed + 1000003,
                       "test");
}

RunData load_run_data(const DataSpec& spec, std::size_t points) {
  RunData data;
  if (!spec.train_manifest.empty()) {
    data.train = load_manifest(spec.train_manifest, points, spec.seed);
  } else {
    data.train = synth_dataset(synthetic_classes(spec.classes), spec.train_per_class, points, spec.noise, spec.seed,
                               "train");
  }
  data.test = load_test_data(spec, points);
  if (data.test.class_names != data.train.class_names) {
    throw std::invalid_argument("train and test sets list different classes");
  }
  return data;
}

RunOutcome run_training(RunConfig config, std::ostream* progress, const Checkpoint* resume) {
  RunData data = load_run_data(config.data, config.model.points);
  config.model.classes = data.train.num_classes();
  config.train.seed = config.seed;
  config.train.validate();

  RunOutcome outcome;
  outcome.class_names = data.train.class_names;
  outcome.dir = config.out;
  std::filesystem::create_directories(outcome.dir);
  write_json(outcome.dir / "config.json", config);

  Model<float> model = resume ? restore_model(*resume) : Model<float>(make_model_config(config.model), config.seed);
  if (resume && model.config().classes != config.model.classes) {
    throw std::invalid_argument("checkpoint has " + std::to_string(model.config().classes) + " classes, data has " +
                                std::to_string(config.model.classes));
  }
  std::ofstream log(outcome.dir / "log.csv", resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + (outcome.dir / "log.csv").string());
  if (!resume) log << csv_header() << '\n';

  auto on_epoch = [&](const EpochLog& e) {
    log << csv_row(e) << '\n' << std::flush;
    if (progress) {
      *progress << "epoch " << e.epoch << "/" << config.train.epochs << "  loss " << e.train_loss << "  train "
                << e.train_acc << "  test mAcc " << e.test_macc << "  OA " << e.test_oa << std::endl;
    }
    const bool reached = config.stop_train_acc > 0 && e.train_acc >= config.stop_train_acc &&
                         e.test_macc >= config.stop_test_acc && e.test_oa >= config.stop_test_acc;
    return !reached;
  };
  outcome.result = train(model, data.train, &data.test, config.train, on_epoch, resume ? &resume->state : nullptr);
  save_checkpoint(make_checkpoint(model, data.train.class_names, config.train, outcome.result.state),
                  outcome.dir / "checkpoint.json");
  outcome.test = evaluate(model, data.test, config.train.batch_size);
  nlohmann::json metrics{{"test", outcome.test}, {"epochs_run", outcome.result.state.epoch}};
  if (!outcome.result.logs.empty()) metrics["final_epoch"] = outcome.result.logs.back();
  write_json(outcome.dir / "metrics.json", metrics);
  return outcome;
}

}  // namespace ctn
