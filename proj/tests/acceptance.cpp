// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.
// Progress for the long training runs goes to stderr.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "ctn/attention.hpp"
#include "ctn/checkpoint.hpp"
#include "ctn/costs.hpp"
#include "ctn/gradsuite.hpp"
#include "ctn/metrics.hpp"
#include "ctn/network.hpp"
#include "ctn/run.hpp"
#include "ctn/saliency.hpp"
#include "ctn/sampling.hpp"
#include "ctn/train.hpp"
#include "oracles.hpp"

using namespace ctn;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

int failures = 0;
std::FILE* report_file = nullptr;

void emit(const std::string& line) {
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  if (report_file) {
    std::fprintf(report_file, "%s\n", line.c_str());
    std::fflush(report_file);
  }
}

void report(int id, const std::string& title, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  emit(std::string(pass ? "PASS" : "FAIL") + " [" + std::to_string(id) + "] " + title + ": " + detail);
}

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

PointCloud permuted(const PointCloud& cloud, std::mt19937_64& rng) {
  std::vector<std::size_t> perm(cloud.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  PointCloud out = cloud;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out.positions[i] = cloud.positions[perm[i]];
    out.normals[i] = cloud.normals[perm[i]];
  }
  return out;
}

std::vector<const PointCloud*> pointers(const Dataset& data) {
  std::vector<const PointCloud*> out;
  for (const auto& c : data.clouds) out.push_back(&c);
  return out;
}

void gradient_suite() {
  const auto start = Clock::now();
  const auto cases = run_grad_suite("all");
  const double elapsed = seconds_since(start);
  bool all = true;
  double worst_block = 0.0, worst_model = 0.0;
  std::size_t gfl = 0, edge = 0, model = 0;
  std::string failed;
  for (const auto& c : cases) {
    if (!c.report.passed) {
      all = false;
      failed += " " + c.scope + "/" + c.name;
    }
    if (c.scope == "model") {
      ++model;
      worst_model = std::max(worst_model, c.report.max_rel_error);
    } else {
      worst_block = std::max(worst_block, c.report.max_rel_error);
    }
    if (c.name.rfind("gfl ", 0) == 0) ++gfl;
    if (c.name.find("edge_conv") != std::string::npos) ++edge;
  }
  const bool pass = all && gfl == 24 && edge >= 1 && model >= 1 && worst_block < 1e-4 && worst_model < 1e-3 &&
                    elapsed < 120.0;
  report(1, "gradient suite",
         pass, fmt("%zu checks (%zu GFL mechanism/operator pairs), worst op/block rel err %.2e < 1e-4, "
                   "micro model %.2e < 1e-3, %.1f s < 120 s%s",
                   cases.size(), gfl, worst_block, worst_model, elapsed, failed.empty() ? "" : (" failed:" + failed).c_str()));
}

void permutation_invariance() {
  const auto start = Clock::now();
  ModelOptions options;
  options.points = 256;
  options.classes = 8;
  const Model<float> model(make_model_config(options), 11);
  const Dataset data = synth_dataset(default_shape_classes(), 7, 256, 0.01, 99);
  std::mt19937_64 rng(5);
  double worst = 0.0;
  for (std::size_t i = 0; i < 50; ++i) {
    const PointCloud& cloud = data.clouds[i];
    const PointCloud moved = permuted(cloud, rng);
    const PointCloud* a[] = {&cloud};
    const PointCloud* b[] = {&moved};
    const Tensor<float> la = model.logits(a, Mode::eval);
    const Tensor<float> lb = model.logits(b, Mode::eval);
    for (std::size_t k = 0; k < la.size(); ++k) {
      worst = std::max(worst, static_cast<double>(std::abs(la.data()[k] - lb.data()[k])));
    }
  }
  const double elapsed = seconds_since(start);
  report(2, "permutation invariance", worst < 1e-5 && elapsed < 60.0,
         fmt("50 clouds, N=256, float32, max-abs logit difference %.3e < 1e-5, %.1f s < 60 s", worst, elapsed));
}

void oracle_equivalence() {
  const auto start = Clock::now();
  std::mt19937_64 rng(2718);
  std::size_t fps_ok = 0, ball_ok = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 64;
    const auto p = oracle::random_positions(n, trial % 3 == 0, rng);
    const std::size_t s = 1 + rng() % n;
    const auto picked = farthest_point_sample(p, s);
    if (picked == oracle::fps(p, s)) ++fps_ok;
    const double radius = 0.05 + static_cast<double>(rng() % 1000) / 1000.0;
    const std::size_t k = 1 + rng() % 32;
    const auto groups = ball_query(p, picked, radius, k);
    bool rows = true;
    for (std::size_t c = 0; c < picked.size(); ++c) {
      const auto row = groups.row(c);
      rows = rows && std::vector<std::size_t>(row.begin(), row.end()) == oracle::ball_row(p, picked[c], radius, k);
    }
    if (rows) ++ball_ok;
  }
  const double elapsed = seconds_since(start);
  report(3, "FPS / ball query oracles", fps_ok == 200 && ball_ok == 200 && elapsed < 30.0,
         fmt("200 instances N<=64: FPS %zu/200, ball query %zu/200 identical, %.2f s < 30 s", fps_ok, ball_ok, elapsed));
}

template <typename T>
double attention_row_error(std::mt19937_64& rng) {
  double worst = 0.0;
  const Operator ops[] = {Operator::dot,         Operator::concatenation, Operator::summation,
                          Operator::subtraction, Operator::division,      Operator::hadamard};
  std::uniform_real_distribution<double> u(-1.0, 1.0), pos(0.5, 1.5);
  for (Operator op : ops) {
    for (std::size_t s : {1, 5, 16, 64}) {
      AttentionConfig cfg;
      cfg.op = op;
      cfg.width = 8;
      ParamStore<T> store;
      Rng init(rng());
      const GflBlock<T> block(store, "g", cfg, init);
      std::vector<T> y(2 * s * 8), p(2 * s * 3);
      for (T& v : y) v = static_cast<T>(op == Operator::division ? pos(rng) : u(rng));
      for (T& v : p) v = static_cast<T>(u(rng));
      const auto out = block.attend(Tensor<T>({2, s, 8}, y), Tensor<T>({2, s, 3}, p), Mode::train);
      const Tensor<T> sums = sum(out.weights, 2);
      for (T v : sums.data()) worst = std::max(worst, std::abs(static_cast<double>(v) - 1.0));
    }
  }
  return worst;
}

void attention_normalization() {
  std::mt19937_64 rng(31);
  const double err_double = attention_row_error<double>(rng);
  const double err_float = attention_row_error<float>(rng);
  double self = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const std::size_t s = 1 + rng() % 16;
    std::vector<double> q(s * 8);
    for (double& v : q) v = u(rng);
    const Tensor<double> qt({1, s, 8}, q);
    const Tensor<double> d = delta(qt, qt, Operator::subtraction);
    for (std::size_t m = 0; m < s; ++m) {
      for (std::size_t c = 0; c < 8; ++c) self = std::max(self, std::abs(d.data()[(m * s + m) * 8 + c]));
    }
    const Tensor<double> same = broadcast_to(slice(qt, 1, 0, 1), {1, s, 8});
    const Tensor<double> flat = delta(same, same, Operator::subtraction);
    for (double v : flat.data()) self = std::max(self, std::abs(v));
  }
  report(4, "attention normalization",
         err_double <= 1e-6 && err_float <= 1e-6 && self == 0.0,
         fmt("all 6 operators, S in {1,5,16,64}: max |sum - 1| %.2e (double), %.2e (float32) <= 1e-6; "
             "subtraction delta(q,q) max |.| = %g",
             err_double, err_float, self));
}

void metrics_recount() {
  std::mt19937_64 rng(404);
  std::size_t exact = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 2 + rng() % 39;
    std::vector<std::vector<std::size_t>> confusion(c, std::vector<std::size_t>(c, 0));
    for (auto& row : confusion) {
      if (rng() % 7 == 0) continue;  // some classes absent
      for (auto& v : row) v = rng() % 5;
    }
    confusion[0][0] += 1;
    std::vector<std::size_t> labels, predicted;
    oracle::expand(confusion, labels, predicted);
    const Metrics m = compute_metrics(labels, predicted, c);
    const auto expect = oracle::recount(confusion);
    if (m.confusion == confusion && m.mean_accuracy == expect.mean_accuracy &&
        m.overall_accuracy == expect.overall_accuracy) {
      ++exact;
    }
  }
  report(5, "metrics", exact == 20, fmt("%zu/20 random confusion matrices reproduce mAcc and OA exactly", exact));
}

struct SeedRun {
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  bool reached = false;
  double train_acc = 0.0, multi_macc = 0.0, multi_oa = 0.0, single_macc = 0.0;
  double multi_seconds = 0.0;
};

TrainResult fit(Model<float>& model, const RunData& data, std::uint64_t seed, std::size_t max_epochs,
                const std::function<bool(const EpochLog&)>& keep_going, const std::string& tag) {
  TrainConfig t;
  t.epochs = 200;
  t.seed = seed;
  return train(model, data.train, &data.test, t, [&](const EpochLog& log) {
    std::fprintf(stderr, "  %s seed %llu epoch %zu: loss %.4f train %.4f test mAcc %.4f OA %.4f\n", tag.c_str(),
                 static_cast<unsigned long long>(seed), log.epoch, log.train_loss, log.train_acc, log.test_macc,
                 log.test_oa);
    return log.epoch < max_epochs && keep_going(log);
  });
}

void desk_scale(std::size_t seeds, std::optional<Model<float>>& keep) {
  DataSpec spec;  // 8 classes, 100 train / 25 test per class
  const RunData data = load_run_data(spec, 256);
  ModelOptions multi;
  multi.points = 256;
  multi.classes = data.train.num_classes();
  ModelOptions single = multi;
  single.scales = 1;

  std::vector<SeedRun> runs;
  for (std::uint64_t seed = 1; seed <= seeds; ++seed) {
    SeedRun r;
    r.seed = seed;
    const auto start = Clock::now();
    Model<float> model(make_model_config(multi), seed);
    const auto result = fit(model, data, seed, 200, [](const EpochLog& log) {
      return !(log.train_acc >= 0.98 && log.test_macc >= 0.90 && log.test_oa >= 0.90);
    }, "multi");
    r.multi_seconds = seconds_since(start);
    const EpochLog& last = result.logs.back();
    r.epochs = last.epoch;
    r.train_acc = last.train_acc;
    r.multi_macc = last.test_macc;
    r.multi_oa = last.test_oa;
    r.reached = last.train_acc >= 0.98 && last.test_macc >= 0.90 && last.test_oa >= 0.90;

    Model<float> baseline(make_model_config(single), seed);
    const auto base = fit(baseline, data, seed, r.epochs, [](const EpochLog&) { return true; }, "single");
    r.single_macc = base.logs.back().test_macc;
    runs.push_back(r);
    if (seed == 1) keep.emplace(std::move(model));
  }

  std::size_t reached = 0, wins = 0;
  std::string detail;
  double first_seconds = runs.empty() ? 0.0 : runs.front().multi_seconds;
  for (const auto& r : runs) {
    if (r.reached) ++reached;
    if (r.multi_macc >= r.single_macc) ++wins;
    detail += fmt(" | seed %llu: %zu ep, train %.3f, test mAcc %.3f OA %.3f, single mAcc %.3f",
                  static_cast<unsigned long long>(r.seed), r.epochs, r.train_acc, r.multi_macc, r.multi_oa,
                  r.single_macc);
  }
  const std::size_t need_wins = seeds >= 5 ? 3 : (seeds * 3 + 4) / 5;
  report(6, "desk-scale learning", reached == runs.size() && wins >= need_wins && first_seconds < 1800.0,
         fmt("800/200 clouds, 8 classes, N=256: %zu/%zu seeds reach train>=0.98 and test>=0.90 within 200 epochs "
             "(seed 1 in %.0f s < 1800 s); multi-scale mAcc >= single-scale in %zu/%zu seeds (need %zu)",
             reached, runs.size(), first_seconds, wins, runs.size(), need_wins) +
             detail);
}

void cost_accounting() {
  bool exact = true;
  std::size_t configs = 0;
  for (std::size_t scales : {1, 3}) {
    for (Operator op : {Operator::dot, Operator::concatenation, Operator::summation, Operator::subtraction,
                        Operator::division, Operator::hadamard}) {
      for (Mechanism m : {Mechanism::basic, Mechanism::offset, Mechanism::pa_residual}) {
        ModelOptions o;
        o.scales = scales;
        o.op = op;
        o.mechanism = m;
        o.position_encoding = op != Operator::summation;
        const ModelConfig config = make_model_config(o);
        const Model<float> model(config, 1);
        exact = exact && count_costs(config).parameters == model.store().parameter_count();
        ++configs;
      }
    }
  }
  ModelOptions multi;
  ModelOptions single = multi;
  single.scales = 1;
  const Costs m = count_costs(make_model_config(multi));
  const Costs s = count_costs(make_model_config(single));
  const double ratio = static_cast<double>(m.parameters) / 4.22e6;
  report(7, "cost accounting",
         exact && std::abs(ratio - 1.0) <= 0.3 && s.parameters < m.parameters && s.flops() < m.flops(),
         fmt("count_costs equals instantiated parameters in %zu/%zu configs (N=1024, C=40); multi-scale %.3fM params "
             "(%.0f%% of 4.22M), %.2f GFLOPs; single-scale %.3fM params, %.2f GFLOPs",
             exact ? configs : std::size_t(0), configs, m.parameters / 1e6, 100.0 * ratio, m.flops() / 1e9,
             s.parameters / 1e6, s.flops() / 1e9));
}

void checkpoint_and_determinism() {
  const Dataset data = synth_dataset(default_shape_classes(), 4, 256, 0.01, 17);
  const Dataset test = synth_dataset(default_shape_classes(), 2, 256, 0.01, 18, "test");
  ModelOptions o;
  o.points = 256;
  o.classes = 8;
  TrainConfig t;
  t.epochs = 2;
  t.seed = 5;
  const auto run = [&](Model<float>& model) { return train(model, data, &test, t); };
  Model<float> a(make_model_config(o), 5), b(make_model_config(o), 5);
  const auto ra = run(a);
  const auto rb = run(b);
  bool same_logs = ra.logs.size() == rb.logs.size();
  for (std::size_t i = 0; same_logs && i < ra.logs.size(); ++i) same_logs = csv_row(ra.logs[i]) == csv_row(rb.logs[i]);

  const auto path = std::filesystem::temp_directory_path() / "ctn_acceptance_checkpoint.json";
  save_checkpoint(make_checkpoint(a, data.class_names, t, ra.state), path);
  const Model<float> restored = restore_model(load_checkpoint(path));
  std::filesystem::remove(path);
  const auto batch = pointers(test);
  const Tensor<float> la = a.logits(batch, Mode::eval);
  const Tensor<float> lb = restored.logits(batch, Mode::eval);
  const bool bit_exact = la.size() == lb.size() && std::memcmp(la.data().data(), lb.data().data(), la.size() * sizeof(float)) == 0;
  report(8, "checkpoint and determinism", bit_exact && same_logs,
         fmt("eval logits after save/load %s on %zu clouds; two seeded runs %s over %zu epochs",
             bit_exact ? "bit-identical" : "DIFFER", test.size(), same_logs ? "produce identical logs" : "DIFFER",
             ra.logs.size()));
}

/// Share of two-spheres test samples whose high-score points (>= 0.5) sit
/// mostly (>= 80%) on one of the two spheres.
void two_spheres_saliency(Model<float>& model) {
  DataSpec spec;
  const Dataset test = load_test_data(spec, 256);
  std::size_t label = 0;
  while (label < test.class_names.size() && test.class_names[label] != "two-spheres") ++label;
  std::size_t samples = 0, focused = 0;
  for (const auto& cloud : test.clouds) {
    if (cloud.label != label) continue;
    ++samples;
    // The spheres separate along the principal horizontal axis.
    double sxx = 0, sxy = 0, syy = 0;
    for (const auto& p : cloud.positions) {
      sxx += p[0] * p[0];
      sxy += p[0] * p[1];
      syy += p[1] * p[1];
    }
    const double angle = 0.5 * std::atan2(2.0 * sxy, sxx - syy);
    const double ax = std::cos(angle), ay = std::sin(angle);
    const SaliencyResult s = saliency(model, cloud, label);
    std::size_t side[2] = {0, 0};
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      if (s.scores[i] >= 0.5) ++side[cloud.positions[i][0] * ax + cloud.positions[i][1] * ay > 0.0 ? 1 : 0];
    }
    const std::size_t high = side[0] + side[1];
    if (!s.degenerate && high > 0 && std::max(side[0], side[1]) >= 0.8 * static_cast<double>(high)) ++focused;
  }
  const double share = samples ? static_cast<double>(focused) / static_cast<double>(samples) : 0.0;
  emit(fmt("INFO saliency on two-spheres (not a primary criterion): %zu/%zu test samples (%.0f%%) concentrate "
           "high scores on one sphere (target >= 80%%)",
           focused, samples, 100.0 * share));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  std::size_t seeds = 5;
  app.add_option("--only", only, "run just these criteria")->check(CLI::Range(1, 8));
  std::string report_path;
  app.add_option("--report", report_path, "also write the result lines to this file");
  app.add_option("--seeds", seeds, "seeds for the desk-scale runs")->check(CLI::Range(1, 5));
  CLI11_PARSE(app, argc, argv);
  const auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  if (!report_path.empty() && !(report_file = std::fopen(report_path.c_str(), "w"))) {
    std::fprintf(stderr, "cannot write %s\n", report_path.c_str());
    return 1;
  }
  const auto start = Clock::now();
  if (wanted(1)) gradient_suite();
  if (wanted(2)) permutation_invariance();
  if (wanted(3)) oracle_equivalence();
  if (wanted(4)) attention_normalization();
  if (wanted(5)) metrics_recount();
  if (wanted(7)) cost_accounting();
  if (wanted(8)) checkpoint_and_determinism();
  if (wanted(6)) {
    std::optional<Model<float>> trained;
    desk_scale(seeds, trained);
    if (trained) two_spheres_saliency(*trained);
  }
  emit(fmt("%s: %d failing criteria, %.0f s total", failures ? "FAIL" : "PASS", failures, seconds_since(start)));
  if (report_file) std::fclose(report_file);
  return failures ? 1 : 0;
}
