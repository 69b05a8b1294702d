#include "ctn/gradsuite.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>

#include "ctn/attention.hpp"
#include "ctn/layers.hpp"
#include "ctn/lfa.hpp"
#include "ctn/network.hpp"

namespace ctn {

namespace {

using D = double;
using T = Tensor<D>;

constexpr double kOpTolerance = 1e-4;
constexpr double kModelTolerance = 1e-3;
// Blocks and the model chain many ReLUs and max-pools; a 1e-5 step
// occasionally straddles one of those kinks, 1e-6 keeps clear of them.
constexpr double kOpStep = 1e-5;
constexpr double kBlockStep = 1e-6;

T random(const Shape& shape, Rng& rng, double bound = 1.0) {
  return T(shape, uniform_values<D>(shape_numel(shape), bound, rng), true);
}

// Uniform magnitudes in [lo, hi] with random signs: keeps inputs off kinks
// and away from zero divisors.
T away_from_zero(const Shape& shape, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<D> v(shape_numel(shape));
  for (D& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return T(shape, std::move(v), true);
}

std::vector<T> params_of(const ParamStore<D>& store) {
  std::vector<T> out;
  for (const auto& [name, t] : store.params()) out.push_back(t);
  return out;
}

// Zero biases and unit/zero batchnorm affines put the position encoding's
// diagonal (P_m - P_m = 0, normalized to exactly beta) on the ReLU corner.
// Checks run at a generic point instead.
void jitter(ParamStore<D>& store, Rng& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& [name, t] : store.params()) {
    const bool gamma = name.ends_with(".gamma");
    if (!gamma && !name.ends_with(".beta") && !name.ends_with(".bias")) continue;
    for (D& v : t.mutable_data()) v = (gamma ? 1.0 : 0.0) + u(rng);
  }
}

std::vector<T> join(std::vector<T> a, const std::vector<T>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

class Suite {
 public:
  Suite(std::string scope, std::uint64_t seed, double step) : scope_(std::move(scope)), rng_(seed), step_(step) {}

  // The projection weights are fixed before checking so every evaluation of
  // f sees the same scalar function.
  void check(const std::string& name, const std::function<T()>& build, std::vector<T> inputs,
             double tolerance = kOpTolerance) {
    const T probe = build();
    const T w(probe.shape(), uniform_values<D>(probe.size(), 1.0, rng_));
    GradCase c{scope_, name, tolerance, grad_check([&] { return sum(mul(build(), w)); }, std::move(inputs), tolerance, step_)};
    cases_.push_back(std::move(c));
  }

  Rng& rng() { return rng_; }
  std::vector<GradCase>& cases() { return cases_; }

 private:
  std::string scope_;
  Rng rng_;
  double step_;
  std::vector<GradCase> cases_;
};

void op_cases(Suite& s) {
  Rng& rng = s.rng();
  {
    T a = random({2, 3, 4}, rng), b = random({3, 1}, rng);
    s.check("add broadcast", [=] { return add(a, b); }, {a, b});
    s.check("sub broadcast", [=] { return sub(a, b); }, {a, b});
    s.check("mul broadcast", [=] { return mul(a, b); }, {a, b});
    T c = away_from_zero({3, 1}, rng, 0.5, 1.5);
    s.check("div broadcast", [=] { return div(a, c); }, {a, c});
  }
  {
    T a = random({2, 3, 4}, rng), b = random({4, 5}, rng);
    s.check("matmul", [=] { return matmul(a, b); }, {a, b});
    T c = random({2, 1, 3, 4}, rng), e = random({3, 4, 2}, rng);
    s.check("matmul batched broadcast", [=] { return matmul(c, e); }, {c, e});
  }
  {
    T x = away_from_zero({3, 5}, rng, 0.1, 1.0);
    s.check("relu", [=] { return relu(x); }, {x});
    s.check("scale", [=] { return scale(x, 2.5); }, {x});
    s.check("l1_normalize", [=] { return l1_normalize(x, 1); }, {x});
  }
  {
    T x = random({2, 4, 3}, rng, 2.0);
    s.check("softmax", [=] { return softmax(x, 1); }, {x});
    s.check("max_reduce", [=] { return max_reduce(x, 1).values; }, {x});
    s.check("sum", [=] { return sum(x); }, {x});
    s.check("sum axis", [=] { return sum(x, 2); }, {x});
    s.check("mean", [=] { return mean(x); }, {x});
    s.check("slice", [=] { return slice(x, 1, 1, 2); }, {x});
    const std::vector<std::size_t> idx{3, 0, 3, 1};
    s.check("gather repeated", [=] { return gather(x, std::span<const std::size_t>(idx), 1); }, {x});
    s.check("reshape", [=] { return reshape(x, {4, 6}); }, {x});
    s.check("transpose", [=] { return transpose(x, 0, 2); }, {x});
    T y = random({2, 1, 3}, rng);
    s.check("broadcast_to", [=] { return broadcast_to(y, {2, 4, 3}); }, {y});
    T z = random({2, 2, 3}, rng);
    s.check("concat", [=] { return concat<D>({x, z}, 1); }, {x, z});
  }
  {
    T x = random({2, 3, 4}, rng), w = random({4, 5}, rng), b = random({5}, rng);
    s.check("linear", [=] { return linear(x, w, b); }, {x, w, b});
    s.check("linear no bias", [=] { return linear(x, w, T()); }, {x, w});
  }
  {
    T x = random({6, 4}, rng), g = random({4}, rng), b = random({4}, rng);
    auto state = std::make_shared<BatchNormState<D>>(4);
    s.check("batchnorm train", [=] { return batchnorm(x, g, b, *state, Mode::train); }, {x, g, b});
    s.check("batchnorm eval", [=] { return batchnorm(x, g, b, *state, Mode::eval); }, {x, g, b});
  }
  {
    T logits = random({4, 5}, rng, 2.0);
    const std::vector<std::size_t> labels{0, 3, 4, 1};
    s.check("cross_entropy", [=] { return cross_entropy(logits, std::span<const std::size_t>(labels)); },
            {logits});
  }
  {
    T logits = random({2, 3, 4, 5}, rng, 2.0), v = random({2, 4, 5}, rng);
    s.check("attention_aggregate", [=] { return attention_aggregate(logits, v); }, {logits, v});
  }
}

BatchPositions random_positions(std::size_t batch, std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  BatchPositions out(batch);
  for (auto& cloud : out) {
    for (std::size_t i = 0; i < n; ++i) cloud.push_back({u(rng), u(rng), u(rng)});
  }
  return out;
}

void block_cases(Suite& s) {
  Rng& rng = s.rng();
  {
    T cf = random({2, 3, 1, 4}, rng), cp = random({2, 3, 1, 3}, rng), nf = random({2, 3, 5, 4}, rng);
    s.check("context_fuse", [=] { return context_fuse(cf, cp, nf); }, {cf, cp, nf});
    auto store = std::make_shared<ParamStore<D>>();
    Rng init(7);
    std::vector<Lbr<D>> layers{Lbr<D>::create(*store, "l0", 11, 6, init), Lbr<D>::create(*store, "l1", 6, 5, init)};
    jitter(*store, init);
    s.check("edge_conv + maxpool",
            [=] { return local_maxpool(edge_conv(context_fuse(cf, cp, nf), layers, Mode::train)); },
            join({cf, cp, nf}, params_of(*store)));
  }
  {
    LfaConfig config;
    config.grouping.scales = {{0.6, 4}, {1.2, 6}};
    config.widths = {{5}, {4, 3}};
    auto store = std::make_shared<ParamStore<D>>();
    Rng init(11);
    auto block = std::make_shared<LfaBlock<D>>(*store, "lfa", 4, config, true, init);
    jitter(*store, init);
    const BatchPositions pos = random_positions(2, 12, rng);
    T f = random({2, 12, 4}, rng);
    s.check("lfa block", [=] { return block->forward(f, pos, 5, Mode::train).features; },
            join({f}, params_of(*store)));
    const auto centers = block->forward(f, pos, 5, Mode::train).center_index;
    s.check("lfa scale reference", [=] { return block->scale_reference(f, pos, centers, 1, Mode::train); },
            join({f}, params_of(*store)));
  }
  {
    T q = random({2, 4, 3}, rng), k = random({2, 4, 3}, rng), v = random({2, 4, 3}, rng);
    s.check("scalar_attention", [=] { return scalar_attention(q, k, v).features; }, {q, k, v});
  }
  const std::size_t batch = 2, tokens = 4, width = 4;
  for (Operator op : {Operator::dot, Operator::concatenation, Operator::summation, Operator::subtraction,
                      Operator::division, Operator::hadamard}) {
    for (Mechanism m : {Mechanism::basic, Mechanism::offset, Mechanism::ascn_residual, Mechanism::pa_residual}) {
      AttentionConfig config;
      config.mechanism = m;
      config.op = op;
      config.width = width;
      auto store = std::make_shared<ParamStore<D>>();
      Rng init(13);
      auto block = std::make_shared<GflBlock<D>>(*store, "gfl", config, init);
      jitter(*store, init);
      // Division needs keys away from zero: tokens and the key projection
      // both get magnitudes bounded below.
      if (op == Operator::division) {
        const T wk = store->params().at("gfl.wk");
        auto values = wk.node()->value.data();
        for (std::size_t i = 0; i < wk.size(); ++i) values[i] = (i % (width + 1) == 0) ? 1.0 : 0.05 * values[i];
      }
      T y = op == Operator::division ? away_from_zero({batch, tokens, width}, rng, 0.5, 1.0)
                                     : random({batch, tokens, width}, rng);
      T p(Shape{batch, tokens, 3}, uniform_values<D>(batch * tokens * 3, 1.0, rng));
      s.check(std::string("gfl ") + std::string(mechanism_name(m)) + "/" + std::string(operator_name(op)),
              [=] { return block->forward(y, p, Mode::train); }, join({y}, params_of(*store)));
    }
  }
}

void model_cases(Suite& s) {
  ModelConfig config;
  config.points = 16;
  config.classes = 3;
  config.embed_width = 8;
  config.head_widths = {8};
  ModuleConfig m1;
  m1.samples = 4;
  m1.lfa.grouping.scales = {{0.5, 4}, {1.0, 6}};
  m1.lfa.widths = {{4}, {4}};
  m1.attention.width = 8;
  ModuleConfig m2;
  m2.samples = 1;
  m2.lfa.grouping.scales = {{2.0, 4}};
  m2.lfa.widths = {{8}};
  m2.attention.width = 8;
  config.modules = {m1, m2};
  auto model = std::make_shared<Model<D>>(config, 5);
  Rng init(17);
  jitter(model->store(), init);

  std::mt19937_64 gen(s.rng()());
  auto clouds = std::make_shared<std::vector<PointCloud>>();
  for (ShapeKind kind : {ShapeKind::sphere, ShapeKind::cube, ShapeKind::torus}) {
    clouds->push_back(normalize(sample_shape(kind, 16, gen)));
  }
  const std::vector<std::size_t> labels{0, 1, 2};
  s.check("micro model loss",
          [=] {
            std::vector<const PointCloud*> batch;
            for (const auto& c : *clouds) batch.push_back(&c);
            return classification_loss(model->logits(batch, Mode::train), std::span<const std::size_t>(labels));
          },
          params_of(model->store()), kModelTolerance);
}

}  // namespace

std::vector<GradCase> run_grad_suite(const std::string& scope, std::uint64_t seed) {
  if (scope != "ops" && scope != "blocks" && scope != "model" && scope != "all") {
    throw std::invalid_argument("unknown gradcheck scope '" + scope + "' (ops, blocks, model, all)");
  }
  std::vector<GradCase> out;
  auto run = [&](const char* name, void (*fn)(Suite&), double step) {
    if (scope != "all" && scope != name) return;
    Suite suite(name, seed, step);
    fn(suite);
    out.insert(out.end(), suite.cases().begin(), suite.cases().end());
  };
  run("ops", op_cases, kOpStep);
  run("blocks", block_cases, kBlockStep);
  run("model", model_cases, kBlockStep);
  return out;
}

}  // namespace ctn
