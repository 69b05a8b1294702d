#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"

#include "ctn/gradcheck.hpp"
#include "ctn/tensor.hpp"

using namespace ctn;
using T = Tensor<double>;

namespace {

std::vector<double> values(const T& t) { return {t.data().begin(), t.data().end()}; }

T random_tensor(const Shape& shape, std::mt19937_64& rng, bool grad = true) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return T(shape, v, grad);
}

}  // namespace

TEST_CASE("matmul examples and errors") {
  CHECK(matmul(T({1, 1}, {2}), T({1, 1}, {3})).item() == 6.0);
  std::mt19937_64 rng(3);
  const T x = random_tensor({3, 4}, rng, false);
  const T eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(values(matmul(eye, x)) == values(x));
  try {
    matmul(T::zeros({2, 3}), T::zeros({2, 3}));
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("(2, 3)") != std::string::npos);
  }
}

TEST_CASE("elementwise arithmetic and broadcasting") {
  CHECK(values(sub(T({2}, {1, 2}), T({2}, {1, 2}))) == std::vector<double>{0, 0});
  const T a = T::zeros({4, 1, 3});
  const T b = T::zeros({1, 4, 3});
  CHECK(sub(a, b).shape() == Shape{4, 4, 3});
  CHECK_THROWS_AS(add(T::zeros({2, 3}), T::zeros({3, 2})), DimensionError);
  CHECK_THROWS_AS(div(T({2}, {1, 1}), T({2}, {1, 0})), DomainError);
  CHECK(values(mul(T({2, 1}, {2, 3}), T({2}, {1, 10}))) == std::vector<double>{2, 20, 3, 30});
}

TEST_CASE("activations and normalizations") {
  const T s = softmax(T({2}, {0, 0}), 0);
  CHECK(values(s) == std::vector<double>{0.5, 0.5});
  CHECK(values(l1_normalize(T({3}, {2, -2, 4}), 0)) == std::vector<double>{0.25, -0.25, 0.5});
  CHECK(values(relu(T({2}, {-1, 3}))) == std::vector<double>{0, 3});
  CHECK(values(scale(T({2}, {1, -2}), 3.0)) == std::vector<double>{3, -6});

  std::mt19937_64 rng(5);
  const T x = scale(random_tensor({4, 7, 5}, rng, false), 20.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const T p = softmax(x, axis);
    const T total = sum(p, axis);
    for (double v : p.data()) CHECK((v > 0.0 && v < 1.0));
    for (double v : total.data()) CHECK(std::abs(v - 1.0) < 1e-6);
  }
}

TEST_CASE("max_reduce values, ties and gradient routing") {
  const auto r = max_reduce(T({2, 2}, {1, 5, 3, 2}), 0);
  CHECK(values(r.values) == std::vector<double>{3, 5});
  CHECK(r.indices == std::vector<std::size_t>{1, 0});
  CHECK(max_reduce(T({3}, {4, 4, 4}), 0).indices.front() == 0);

  std::mt19937_64 rng(9);
  const T x = random_tensor({3, 6, 4}, rng);
  const auto m = max_reduce(x, 1);
  const T up = random_tensor({3, 4}, rng, false);
  sum(mul(m.values, up)).backward();
  double routed = 0.0;
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t c = 0; c < 4; ++c) {
      for (std::size_t k = 0; k < 6; ++k) {
        const double g = x.grad()[(b * 6 + k) * 4 + c];
        if (k != m.indices[b * 4 + c]) CHECK(g == 0.0);
        routed += g;
      }
    }
  }
  double upstream = 0.0;
  for (double v : up.data()) upstream += v;
  CHECK(routed == doctest::Approx(upstream).epsilon(1e-12));
}

TEST_CASE("concat, slice and gather") {
  CHECK(values(concat<double>({T({1}, {1}), T({2}, {2, 3})}, 0)) == std::vector<double>{1, 2, 3});
  const std::vector<std::size_t> idx{2, 0, 0};
  CHECK(values(gather(T({3}, {10, 20, 30}), std::span<const std::size_t>(idx), 0)) ==
        std::vector<double>{30, 10, 10});

  const T x({3}, {1, 2, 3}, true);
  const std::vector<std::size_t> dup{0, 0};
  gather(x, std::span<const std::size_t>(dup), 0).backward(std::vector<double>{1, 1});
  CHECK(values(T({3}, {x.grad().begin(), x.grad().end()})) == std::vector<double>{2, 0, 0});

  std::mt19937_64 rng(11);
  const T a = random_tensor({2, 3, 4}, rng, false);
  const T b = random_tensor({2, 5, 4}, rng, false);
  const T joined = concat<double>({a, b}, 1);
  CHECK(values(slice(joined, 1, 0, 3)) == values(a));
  CHECK(values(slice(joined, 1, 3, 5)) == values(b));
}

TEST_CASE("linear and batchnorm examples") {
  const T x({2, 3}, {1, -2, 3, 4, 5, -6});
  const T eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(values(linear(x, eye, T::zeros({3}))) == values(x));

  BatchNormState<double> state(1);
  const T gamma({1}, {1}), beta({1}, {0});
  const T y = batchnorm(T({2, 1}, {1, 3}), gamma, beta, state, Mode::train);
  CHECK(y.data()[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(y.data()[1] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(state.running_mean[0] == doctest::Approx(0.2));
  // Normalization uses the biased variance (1); the running average folds in the unbiased one (2).
  CHECK(state.running_var[0] == doctest::Approx(0.9 + 0.1 * 2.0));

  BatchNormState<double> fresh(2);
  const T z({3, 2}, {0.5, -1, 2, 3, -4, 0.25});
  const T out = batchnorm(z, T({2}, {1, 1}), T({2}, {0, 0}), fresh, Mode::eval);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(out.data()[i] == doctest::Approx(z.data()[i]).epsilon(1e-5));
}

TEST_CASE("backward and grad_check examples") {
  const T x = T::scalar(3.0, true);
  mul(x, x).backward();
  CHECK(x.grad()[0] == 6.0);

  const T v({4}, {0.1, -0.3, 2.0, 0.7}, true);
  sum(softmax(v, 0)).backward();
  for (double g : v.grad()) CHECK(std::abs(g) < 1e-12);

  const T w({3}, {0.2, -0.4, 0.9}, true);
  const auto ok = grad_check([&] { return sum(mul(w, w)); }, {w});
  CHECK(ok.passed);
  CHECK(ok.entries == 3);

  const T q({2}, {0.5, -0.5}, true);
  // A deliberately wrong gradient (detach drops one factor) must be caught.
  const auto bad = grad_check([&] { return sum(mul(q, q.detach())); }, {q});
  CHECK_FALSE(bad.passed);
}

TEST_CASE("fused attention aggregation matches the composite") {
  std::mt19937_64 rng(21);
  const T logits = random_tensor({2, 3, 4, 5}, rng, false);
  const T value = random_tensor({2, 4, 5}, rng, false);
  T weights;
  const T fused = attention_aggregate(logits, value, &weights);
  const T e = l1_normalize(softmax(logits, 2), 2);
  const T composite = sum(mul(e, reshape(value, {2, 1, 4, 5})), 2);
  for (std::size_t i = 0; i < fused.size(); ++i) CHECK(fused.data()[i] == doctest::Approx(composite.data()[i]).epsilon(1e-12));
  for (std::size_t i = 0; i < e.size(); ++i) CHECK(weights.data()[i] == doctest::Approx(e.data()[i]).epsilon(1e-12));
}

TEST_CASE("cross entropy examples") {
  const std::vector<std::size_t> label{2};
  CHECK(cross_entropy(T({1, 4}, {0, 0, 0, 0}), std::span<const std::size_t>(label)).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(cross_entropy(T({1, 4}, {0, 0, 60, 0}), std::span<const std::size_t>(label)).item() < 1e-20);
  const std::vector<std::size_t> bad{4};
  CHECK_THROWS(cross_entropy(T({1, 4}, {0, 0, 0, 0}), std::span<const std::size_t>(bad)));
}

TEST_CASE("forward is deterministic") {
  std::mt19937_64 rng(1);
  const T a = random_tensor({8, 16}, rng, false);
  const T b = random_tensor({16, 8}, rng, false);
  const auto run = [&] { return values(softmax(matmul(a, b), 1)); };
  CHECK(run() == run());
}
