#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"

#include "ctn/attention.hpp"

using namespace ctn;
using T = Tensor<double>;

namespace {

std::vector<double> values(const T& t) { return {t.data().begin(), t.data().end()}; }

T random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return T(shape, v);
}

T eye(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return T({n, n}, v);
}

void check_close(const T& a, const T& b, double tol = 1e-12) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(tol));
}

const Operator kOperators[] = {Operator::dot,         Operator::concatenation, Operator::summation,
                               Operator::subtraction, Operator::division,      Operator::hadamard};
const Mechanism kMechanisms[] = {Mechanism::basic, Mechanism::offset, Mechanism::ascn_residual,
                                 Mechanism::pa_residual};

AttentionConfig config(Mechanism m, Operator op, bool pos, std::size_t d) {
  AttentionConfig c;
  c.mechanism = m;
  c.op = op;
  c.position_encoding = pos;
  c.width = d;
  return c;
}

}  // namespace

TEST_CASE("names parse back") {
  for (Operator op : kOperators) CHECK(parse_operator(operator_name(op)) == op);
  for (Mechanism m : kMechanisms) CHECK(parse_mechanism(mechanism_name(m)) == m);
  CHECK(parse_operator("concat") == Operator::concatenation);
  CHECK(parse_mechanism("pa") == Mechanism::pa_residual);
  CHECK_THROWS(parse_operator("cross"));
}

TEST_CASE("qkv projection examples") {
  std::mt19937_64 rng(1);
  const T y = random_tensor({1, 3, 4}, rng);
  const auto id = qkv_project(y, eye(4), eye(4), eye(4));
  CHECK(values(id.query) == values(y));
  const auto zero = qkv_project(y, T::zeros({4, 4}), T::zeros({4, 4}), T::zeros({4, 4}));
  for (const T* t : {&zero.query, &zero.key, &zero.value}) {
    for (double v : t->data()) CHECK(v == 0.0);
  }
}

TEST_CASE("scalar attention examples") {
  std::mt19937_64 rng(2);
  const T v1 = random_tensor({1, 1, 3}, rng);
  check_close(scalar_attention(random_tensor({1, 1, 3}, rng), random_tensor({1, 1, 3}, rng), v1).features, v1);

  const T q = random_tensor({1, 2, 3}, rng);
  const T k({1, 2, 3}, {0.3, -0.1, 0.8, 0.3, -0.1, 0.8});
  const T v({1, 2, 3}, {1, 2, 3, 5, 6, 7});
  const auto out = scalar_attention(q, k, v);
  for (double w : out.weights.data()) CHECK(w == doctest::Approx(0.5));
  for (std::size_t m = 0; m < 2; ++m) CHECK(values(slice(out.features, 1, m, 1)) == std::vector<double>{3, 4, 5});

  const auto big = scalar_attention(random_tensor({2, 6, 4}, rng), random_tensor({2, 6, 4}, rng),
                                    random_tensor({2, 6, 4}, rng));
  for (double s : values(sum(big.weights, 2))) CHECK(std::abs(s - 1.0) < 1e-6);
}

TEST_CASE("delta examples") {
  std::mt19937_64 rng(3);
  const T q = random_tensor({1, 3, 4}, rng);
  const T self = delta(q, q, Operator::subtraction);
  for (std::size_t m = 0; m < 3; ++m) {
    for (std::size_t c = 0; c < 4; ++c) CHECK(self.data()[(m * 3 + m) * 4 + c] == 0.0);
  }
  const T same = broadcast_to(slice(q, 1, 0, 1), {1, 3, 4});
  for (double v : values(delta(same, same, Operator::subtraction))) CHECK(v == 0.0);
  for (double v : values(delta(T::zeros({1, 3, 4}), q, Operator::hadamard))) CHECK(v == 0.0);
  const T d = delta(T({1, 2, 1}, {1, 2}), T({1, 2, 1}, {3, 5}), Operator::subtraction);
  CHECK(d.shape() == Shape{1, 2, 2, 1});
  CHECK(values(d) == std::vector<double>{-2, -4, -1, -3});
  CHECK(delta(q, q, Operator::concatenation).shape() == Shape{1, 3, 3, 8});
  CHECK_THROWS(delta(q, q, Operator::dot));
  CHECK_THROWS_AS(delta(q, T::zeros({1, 3, 4}), Operator::division), DomainError);

  const T k = random_tensor({1, 3, 4}, rng);
  const T qk = delta(q, k, Operator::subtraction);
  const T kq = delta(k, q, Operator::subtraction);
  for (std::size_t m = 0; m < 3; ++m) {
    for (std::size_t n = 0; n < 3; ++n) {
      for (std::size_t c = 0; c < 4; ++c) CHECK(qk.data()[(m * 3 + n) * 4 + c] == -kq.data()[(n * 3 + m) * 4 + c]);
    }
  }
}

TEST_CASE("relative positions and their encoding") {
  std::mt19937_64 rng(4);
  const T p = random_tensor({2, 4, 3}, rng);
  const T r = relative_positions(p);
  REQUIRE(r.shape() == Shape{2, 4, 4, 3});
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t m = 0; m < 4; ++m) {
      for (std::size_t n = 0; n < 4; ++n) {
        for (std::size_t c = 0; c < 3; ++c) {
          const double a = r.data()[((b * 4 + m) * 4 + n) * 3 + c];
          CHECK(a == -r.data()[((b * 4 + n) * 4 + m) * 3 + c]);
          if (m == n) CHECK(a == 0.0);
        }
      }
    }
  }

  ParamStore<double> store;
  Rng init(5);
  const GflBlock<double> block(store, "g", config(Mechanism::offset, Operator::subtraction, true, 5), init);
  const auto& xi = *block.xi();
  for (Mode mode : {Mode::train, Mode::eval}) {
    const T rho = position_encode(p, xi, mode);
    CHECK(rho.shape() == Shape{2, 4, 4, 5});
    const T literal = xi.second(relu(xi.norm(xi.first(relative_positions(p)), mode)));
    check_close(rho, literal);
  }
}

TEST_CASE("vector attention examples and normalization") {
  ParamStore<double> store;
  Rng init(6);
  const GflBlock<double> block(store, "g", config(Mechanism::basic, Operator::subtraction, false, 3), init);
  std::mt19937_64 rng(7);
  const T v = random_tensor({1, 4, 3}, rng);
  const T column_mean = scale(sum(v, 1), 0.25);
  const auto check_uniform = [&](const AttentionOutput<double>& out) {
    for (double w : out.weights.data()) CHECK(w == doctest::Approx(0.25).epsilon(1e-12));
    for (std::size_t m = 0; m < 4; ++m) check_close(reshape(slice(out.features, 1, m, 1), {1, 3}), column_mean);
  };
  // Identical tokens: every pair gives delta = 0, so tau is constant.
  const T same = broadcast_to(random_tensor({1, 1, 3}, rng), {1, 4, 3});
  check_uniform(vector_attention(same, same, v, T(), block.tau(), Operator::subtraction));
  // Distinct tokens with tau's output layer at the zero limit of its init.
  Tensor<double> out_weight = block.tau().second.weight;
  for (double& w : out_weight.mutable_data()) w = 0.0;
  const T q = random_tensor({1, 4, 3}, rng);
  check_uniform(vector_attention(q, q, v, T(), block.tau(), Operator::subtraction));

  const T v1 = random_tensor({1, 1, 3}, rng);
  check_close(vector_attention(random_tensor({1, 1, 3}, rng), random_tensor({1, 1, 3}, rng), v1, T(), block.tau(),
                               Operator::subtraction)
                  .features,
              v1);

  for (Operator op : kOperators) {
    if (op == Operator::dot) continue;
    ParamStore<double> s;
    Rng r(8);
    const GflBlock<double> g(s, "g", config(Mechanism::basic, op, true, 4), r);
    const T y = random_tensor({2, 5, 4}, rng, 0.5, 1.5);
    const T p = random_tensor({2, 5, 3}, rng);
    const auto a = g.attend(y, p, Mode::train);
    REQUIRE(a.weights.shape() == Shape{2, 5, 5, 4});
    for (double w : values(sum(a.weights, 2))) CHECK(std::abs(w - 1.0) < 1e-6);
  }
}

TEST_CASE("offset attention examples") {
  ParamStore<double> store;
  Rng init(9);
  Lbr<double> lbr = Lbr<double>::create(store, "lbr", 2, 2, init);
  auto w = lbr.fc.weight.mutable_data();
  w[0] = 1, w[1] = 0, w[2] = 0, w[3] = 1;
  const T y({1, 2, 2}, {1, 0, 0, 1});
  const T out = offset_attention(y, T({1, 2, 2}, {0.5, 0.5, 0.5, 0.5}), lbr, Mode::eval);
  const std::vector<double> expect{1.5, 0, 0, 1.5};
  for (std::size_t i = 0; i < 4; ++i) CHECK(out.data()[i] == doctest::Approx(expect[i]).epsilon(1e-5));

  std::mt19937_64 rng(10);
  const T z = random_tensor({1, 3, 2}, rng);
  const T same = offset_attention(z, z, lbr, Mode::eval);
  check_close(same, add(lbr(T::zeros({1, 3, 2}), Mode::eval), z));
}

TEST_CASE("gfl block dispatch") {
  std::mt19937_64 rng(11);
  const T y = random_tensor({1, 4, 4}, rng);
  const T p = random_tensor({1, 4, 3}, rng);
  {
    ParamStore<double> store;
    Rng init(12);
    const GflBlock<double> g(store, "g", config(Mechanism::basic, Operator::dot, true, 4), init);
    const auto qkv = qkv_project(y, g.wq(), g.wk(), g.wv());
    check_close(g.forward(y, p, Mode::train), scalar_attention(qkv.query, qkv.key, qkv.value).features);
  }
  {
    ParamStore<double> store;
    Rng init(13);
    const GflBlock<double> g(store, "g", config(Mechanism::pa_residual, Operator::subtraction, true, 4), init);
    for (double& v : store.params().at("g.wv").mutable_data()) v = 0.0;
    check_close(g.forward(y, p, Mode::train), y);
  }
  {
    ParamStore<double> store;
    Rng init(14);
    const GflBlock<double> g(store, "g", config(Mechanism::offset, Operator::subtraction, true, 4), init);
    for (Mode mode : {Mode::train, Mode::eval}) {
      const auto qkv = qkv_project(y, g.wq(), g.wk(), g.wv());
      const T logits = add(g.tau()(delta(qkv.query, qkv.key, Operator::subtraction)), position_encode(p, *g.xi(), mode));
      const T e = l1_normalize(softmax(logits, 2), 2);
      const T attended = sum(mul(e, reshape(qkv.value, {1, 1, 4, 4})), 2);
      check_close(g.forward(y, p, mode), offset_attention(y, attended, *g.lbr(), mode), 1e-10);
    }
  }
}

TEST_CASE("gfl block is permutation equivariant") {
  std::mt19937_64 rng(15);
  const T y = random_tensor({1, 5, 4}, rng, 0.5, 1.5);
  const T p = random_tensor({1, 5, 3}, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  const T yp = gather(y, std::span<const std::size_t>(perm), 1);
  const T pp = gather(p, std::span<const std::size_t>(perm), 1);
  for (Mechanism m : kMechanisms) {
    for (Operator op : kOperators) {
      ParamStore<double> store;
      Rng init(16);
      const GflBlock<double> g(store, "g", config(m, op, true, 4), init);
      const T a = gather(g.forward(y, p, Mode::train), std::span<const std::size_t>(perm), 1);
      check_close(g.forward(yp, pp, Mode::train), a, 1e-10);
    }
  }
}

TEST_CASE("without position encoding the block ignores translation") {
  std::mt19937_64 rng(17);
  const T y = random_tensor({1, 5, 4}, rng);
  const T p = random_tensor({1, 5, 3}, rng);
  const T shifted = add(p, T({3}, {4.0, -2.0, 0.5}));
  for (Operator op : {Operator::subtraction, Operator::hadamard, Operator::dot}) {
    ParamStore<double> store;
    Rng init(18);
    const GflBlock<double> g(store, "g", config(Mechanism::offset, op, false, 4), init);
    CHECK(values(g.forward(y, p, Mode::train)) == values(g.forward(y, shifted, Mode::train)));
  }
}
