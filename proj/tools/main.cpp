// ctn3d: command-line front end.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>

#include "CLI11.hpp"

#include "ctn/checkpoint.hpp"
#include "ctn/costs.hpp"
#include "ctn/gradsuite.hpp"
#include "ctn/run.hpp"
#include "ctn/saliency.hpp"
#include "ctn/serialize.hpp"

using namespace ctn;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

// Flags shared by every verb. Options left unset do not override the config file.
struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t points = 0;
  std::size_t scales = 3;
  std::string mechanism, op, pos_enc;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* out_opt = nullptr;
  CLI::Option* points_opt = nullptr;
  CLI::Option* scales_opt = nullptr;
};

const std::vector<std::string> kOnOff{"on", "off"};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run config")->check(CLI::ExistingFile);  // usage error
  c.seed_opt = cmd->add_option("--seed", c.seed, "random seed");
  c.out_opt = cmd->add_option("--out", c.out, "output directory or file");
  c.points_opt = cmd->add_option("--points", c.points, "points per cloud")->check(CLI::PositiveNumber);
  c.scales_opt = cmd->add_option("--scales", c.scales, "grouping scales")->check(CLI::IsMember({1, 3}));
  cmd->add_option("--mechanism", c.mechanism, "attention mechanism")
      ->check(CLI::IsMember({"basic", "offset", "ascn", "pa"}));
  cmd->add_option("--operator", c.op, "attention operator")
      ->check(CLI::IsMember({"dot", "concat", "sum", "sub", "div", "hadamard"}));
  cmd->add_option("--pos-enc", c.pos_enc, "position encoding")->check(CLI::IsMember(kOnOff));
}

// Config problems are usage errors; everything else unreadable is a data error.
RunConfig read_config(const std::string& path) {
  try {
    return read_json(path).get<RunConfig>();
  } catch (const std::invalid_argument&) {
    throw;
  } catch (const std::exception& e) {
    throw std::invalid_argument(std::string("config ") + path + ": " + e.what());
  }
}

bool on(const std::string& v) { return v == "on"; }

void apply_model_flags(const Common& c, ModelOptions& m) {
  if (c.points_opt->count()) m.points = c.points;
  if (c.scales_opt->count()) m.scales = c.scales;
  if (!c.mechanism.empty()) m.mechanism = parse_mechanism(c.mechanism);
  if (!c.op.empty()) m.op = parse_operator(c.op);
  if (!c.pos_enc.empty()) m.position_encoding = on(c.pos_enc);
}

std::size_t resolve_class(const std::string& text, const std::vector<std::string>& names) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == text) return i;
  }
  std::size_t pos = 0;
  std::size_t value = 0;
  try {
    value = std::stoul(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != text.size() || value >= names.size()) {
    throw std::invalid_argument("unknown class '" + text + "' (name or index below " + std::to_string(names.size()) +
                                ")");
  }
  return value;
}

PointCloud prepare_cloud(const std::string& path, std::size_t points, std::uint64_t seed) {
  return normalize(resample(load_cloud(path), points, seed));
}

void print_metrics(const Metrics& m, const std::vector<std::string>& names) {
  std::cout << std::fixed << std::setprecision(4) << "mAcc " << m.mean_accuracy << "  OA " << m.overall_accuracy
            << "\n";
  std::cout << "confusion (rows: true, columns: predicted)\n";
  for (std::size_t t = 0; t < m.classes; ++t) {
    std::cout << std::setw(14) << (t < names.size() ? names[t] : std::to_string(t));
    for (std::size_t p = 0; p < m.classes; ++p) std::cout << std::setw(5) << m.confusion[t][p];
    std::cout << "   " << m.correct[t] << "/" << m.total[t] << "\n";
  }
  std::cout.unsetf(std::ios::fixed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3DCTN point-cloud classifier"};
  app.require_subcommand(1);

  // train
  Common tc;
  auto* train_cmd = app.add_subcommand("train", "train a model and write a run directory");
  add_common(train_cmd, tc);
  std::string hierarchy, lfa, gfl, train_manifest, test_manifest, resume_path;
  std::size_t epochs = 0, batch_size = 0, classes = 0, train_per_class = 0, test_per_class = 0;
  double lr = 0, momentum = 0, weight_decay = 0, noise = 0, stop_train = 0, stop_test = 0;
  std::uint64_t data_seed = 0;
  train_cmd->add_option("--hierarchy", hierarchy, "N/4, N/16 downsampling")->check(CLI::IsMember(kOnOff));
  train_cmd->add_option("--lfa", lfa, "local feature aggregation")->check(CLI::IsMember(kOnOff));
  train_cmd->add_option("--gfl", gfl, "global feature learning")->check(CLI::IsMember(kOnOff));
  auto* o_epochs = train_cmd->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
  auto* o_batch = train_cmd->add_option("--batch-size", batch_size)->check(CLI::PositiveNumber);
  auto* o_lr = train_cmd->add_option("--lr", lr)->check(CLI::PositiveNumber);
  auto* o_mom = train_cmd->add_option("--momentum", momentum)->check(CLI::NonNegativeNumber);
  auto* o_wd = train_cmd->add_option("--weight-decay", weight_decay)->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--train-manifest", train_manifest);
  train_cmd->add_option("--test-manifest", test_manifest);
  auto* o_classes = train_cmd->add_option("--classes", classes, "synthetic classes")->check(CLI::Range(1, 8));
  auto* o_tpc = train_cmd->add_option("--train-per-class", train_per_class)->check(CLI::PositiveNumber);
  auto* o_vpc = train_cmd->add_option("--test-per-class", test_per_class)->check(CLI::PositiveNumber);
  auto* o_noise = train_cmd->add_option("--noise", noise)->check(CLI::NonNegativeNumber);
  auto* o_dseed = train_cmd->add_option("--data-seed", data_seed);
  auto* o_stop_train = train_cmd->add_option("--stop-train-acc", stop_train, "early stop threshold")
                           ->check(CLI::Range(0.0, 1.0));
  auto* o_stop_test = train_cmd->add_option("--stop-test-acc", stop_test, "early stop threshold")
                          ->check(CLI::Range(0.0, 1.0));
  train_cmd->add_option("--resume", resume_path, "continue from a checkpoint");

  // eval
  Common ec;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(eval_cmd, ec);
  std::string eval_ckpt, eval_manifest;
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--manifest", eval_manifest, "test manifest (default: the run config's test set)")
      ;

  // classify
  Common cc;
  auto* classify_cmd = app.add_subcommand("classify", "top-k classes for one cloud");
  add_common(classify_cmd, cc);
  std::string cls_ckpt, cls_cloud;
  std::size_t top_k = 5;
  classify_cmd->add_option("--checkpoint", cls_ckpt)->required();
  classify_cmd->add_option("--cloud", cls_cloud, ".xyz, .off or .ply file")->required();
  classify_cmd->add_option("--top-k", top_k)->check(CLI::PositiveNumber);

  // bench
  Common bc;
  auto* bench_cmd = app.add_subcommand("bench", "parameter and FLOP table across scales, mechanisms, operators");
  add_common(bench_cmd, bc);
  std::size_t bench_classes = 40;
  bench_cmd->add_option("--classes", bench_classes)->check(CLI::PositiveNumber);

  // gradcheck
  Common gc;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(grad_cmd, gc);
  std::string scope = "all";
  grad_cmd->add_option("--scope", scope)->check(CLI::IsMember({"ops", "blocks", "model", "all"}));

  // saliency
  Common sc;
  auto* sal_cmd = app.add_subcommand("saliency", "per-point attribution of one class");
  add_common(sal_cmd, sc);
  std::string sal_ckpt, sal_cloud, sal_class;
  sal_cmd->add_option("--checkpoint", sal_ckpt)->required();
  sal_cmd->add_option("--cloud", sal_cloud)->required();
  sal_cmd->add_option("--class", sal_class, "class name or index (default: predicted)");

  // synth
  Common yc;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset with train/test manifests");
  add_common(synth_cmd, yc);
  std::size_t syn_classes = 8, syn_train = 100, syn_test = 25;
  double syn_noise = 0.01;
  synth_cmd->add_option("--classes", syn_classes)->check(CLI::Range(1, 8));
  synth_cmd->add_option("--train-per-class", syn_train)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--test-per-class", syn_test)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--noise", syn_noise)->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*train_cmd) {
      RunConfig run;
      if (!tc.config.empty()) run = read_config(tc.config);
      apply_model_flags(tc, run.model);
      if (tc.seed_opt->count()) run.seed = tc.seed;
      if (tc.out_opt->count()) run.out = tc.out;
      if (!hierarchy.empty()) run.model.hierarchy = on(hierarchy);
      if (!lfa.empty()) run.model.lfa = on(lfa);
      if (!gfl.empty()) run.model.gfl = on(gfl);
      if (o_epochs->count()) run.train.epochs = epochs;
      if (o_batch->count()) run.train.batch_size = batch_size;
      if (o_lr->count()) run.train.lr = lr;
      if (o_mom->count()) run.train.momentum = momentum;
      if (o_wd->count()) run.train.weight_decay = weight_decay;
      if (!train_manifest.empty()) run.data.train_manifest = train_manifest;
      if (!test_manifest.empty()) run.data.test_manifest = test_manifest;
      if (o_classes->count()) run.data.classes = classes;
      if (o_tpc->count()) run.data.train_per_class = train_per_class;
      if (o_vpc->count()) run.data.test_per_class = test_per_class;
      if (o_noise->count()) run.data.noise = noise;
      if (o_dseed->count()) run.data.seed = data_seed;
      if (o_stop_train->count()) run.stop_train_acc = stop_train;
      if (o_stop_test->count()) run.stop_test_acc = stop_test;
      if (tc.config.empty() && !tc.points_opt->count()) run.model.points = 256;
      std::optional<Checkpoint> resume;
      if (!resume_path.empty()) resume = load_checkpoint(resume_path);
      const RunOutcome outcome = run_training(run, &std::cout, resume ? &*resume : nullptr);
      std::cout << "run directory " << outcome.dir.string() << "\n";
      print_metrics(outcome.test, outcome.class_names);
      return kOk;
    }
    if (*eval_cmd) {
      const Checkpoint ckpt = load_checkpoint(eval_ckpt);
      const Model<float> model = restore_model(ckpt);
      Dataset data;
      if (!eval_manifest.empty()) {
        data = load_manifest(eval_manifest, model.config().points, ec.seed_opt->count() ? ec.seed : 1);
      } else if (!ec.config.empty()) {
        data = load_test_data(read_config(ec.config).data, model.config().points);
      } else {
        throw std::invalid_argument("eval needs --manifest or --config (a run's config.json)");
      }
      if (data.class_names != ckpt.class_names) throw std::invalid_argument("dataset classes differ from the checkpoint's");
      const Metrics m = evaluate(model, data, ckpt.train.batch_size);
      print_metrics(m, ckpt.class_names);
      if (ec.out_opt->count()) write_json(ec.out, nlohmann::json(m));
      return kOk;
    }
    if (*classify_cmd) {
      const Checkpoint ckpt = load_checkpoint(cls_ckpt);
      const Model<float> model = restore_model(ckpt);
      const PointCloud cloud = prepare_cloud(cls_cloud, model.config().points, cc.seed);
      NoGradGuard no_grad;
      const PointCloud* batch[] = {&cloud};
      const Tensor<float> probs = softmax(model.logits(batch, Mode::eval), 1);
      std::vector<std::size_t> order(probs.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs.data()[a] > probs.data()[b]; });
      for (std::size_t i = 0; i < std::min(top_k, order.size()); ++i) {
        std::printf("%-16s %.6f\n", ckpt.class_names[order[i]].c_str(), static_cast<double>(probs.data()[order[i]]));
      }
      return kOk;
    }
    if (*bench_cmd) {
      ModelOptions base;
      if (!bc.config.empty()) base = read_config(bc.config).model;
      base.classes = bench_classes;
      if (bc.points_opt->count()) base.points = bc.points;
      std::vector<std::size_t> scale_list{3, 1};
      if (bc.scales_opt->count()) scale_list = {bc.scales};
      std::vector<Mechanism> mechs{Mechanism::offset, Mechanism::basic, Mechanism::ascn_residual, Mechanism::pa_residual};
      if (!bc.mechanism.empty()) mechs = {parse_mechanism(bc.mechanism)};
      std::vector<Operator> ops{Operator::subtraction, Operator::dot, Operator::concatenation, Operator::summation,
                                Operator::division, Operator::hadamard};
      if (!bc.op.empty()) ops = {parse_operator(bc.op)};
      if (!bc.pos_enc.empty()) base.position_encoding = on(bc.pos_enc);
      std::printf("%-7s %-10s %-9s %-8s %12s %10s %14s %10s\n", "scales", "mechanism", "operator", "pos-enc",
                  "params", "params(M)", "MACs", "GFLOPs");
      for (std::size_t s : scale_list) {
        for (Mechanism m : mechs) {
          for (Operator op : ops) {
            ModelOptions o = base;
            o.scales = s;
            o.mechanism = m;
            o.op = op;
            const Costs c = count_costs(make_model_config(o));
            std::printf("%-7zu %-10s %-9s %-8s %12zu %10.3f %14zu %10.3f\n", s, std::string(mechanism_name(m)).c_str(),
                        std::string(operator_name(op)).c_str(), o.position_encoding ? "on" : "off", c.parameters,
                        c.parameters / 1e6, c.macs, c.flops() / 1e9);
          }
        }
      }
      return kOk;
    }
    if (*grad_cmd) {
      const auto cases = run_grad_suite(scope, gc.seed_opt->count() ? gc.seed : 1);
      bool ok = true;
      for (const auto& c : cases) {
        ok = ok && c.report.passed;
        std::printf("%s  %-7s %-28s max rel err %.3e (tol %.0e, %zu entries)\n", c.report.passed ? "pass" : "FAIL",
                    c.scope.c_str(), c.name.c_str(), c.report.max_rel_error, c.tolerance, c.report.entries);
      }
      std::printf("%s: %zu checks\n", ok ? "all passed" : "FAILED", cases.size());
      return ok ? kOk : kNumerical;
    }
    if (*sal_cmd) {
      const Checkpoint ckpt = load_checkpoint(sal_ckpt);
      Model<float> model = restore_model(ckpt);
      const PointCloud cloud = prepare_cloud(sal_cloud, model.config().points, sc.seed);
      std::size_t target = 0;
      if (!sal_class.empty()) {
        target = resolve_class(sal_class, ckpt.class_names);
      } else {
        NoGradGuard no_grad;
        const PointCloud* batch[] = {&cloud};
        target = predictions(model.logits(batch, Mode::eval)).front();
      }
      const SaliencyResult r = saliency(model, cloud, target);
      const std::string out = sc.out_opt->count() ? sc.out : "saliency.xyz";
      save_xyz(out, cloud, r.scores);
      std::cout << "class " << ckpt.class_names[target] << " -> " << out << "\n";
      if (r.degenerate) std::cerr << "warning: degenerate saliency (no positive attribution); scores are all zero\n";
      return kOk;
    }
    if (*synth_cmd) {
      const std::string dir = yc.out_opt->count() ? yc.out : "data";
      const std::size_t points = yc.points_opt->count() ? yc.points : 256;
      const std::uint64_t seed = yc.seed_opt->count() ? yc.seed : 1;
      auto all = default_shape_classes();
      const std::vector<ShapeKind> kinds(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(syn_classes));
      const auto train_path = write_manifest(synth_dataset(kinds, syn_train, points, syn_noise, seed, "train"), dir);
      const auto test_path =
          write_manifest(synth_dataset(kinds, syn_test, points, syn_noise, seed + 1000003, "test"), dir);
      std::cout << train_path.string() << "\n" << test_path.string() << "\n";
      return kOk;
    }
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
