#include "ctn/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace ctn {

std::string_view mechanism_name(Mechanism m) {
  switch (m) {
    case Mechanism::basic: return "basic";
    case Mechanism::offset: return "offset";
    case Mechanism::ascn_residual: return "ascn";
    case Mechanism::pa_residual: return "pa";
  }
  return "unknown";
}

std::string_view operator_name(Operator op) {
  switch (op) {
    case Operator::dot: return "dot";
    case Operator::concatenation: return "concat";
    case Operator::summation: return "sum";
    case Operator::subtraction: return "sub";
    case Operator::division: return "div";
    case Operator::hadamard: return "hadamard";
  }
  return "unknown";
}

Mechanism parse_mechanism(std::string_view name) {
  for (Mechanism m : {Mechanism::basic, Mechanism::offset, Mechanism::ascn_residual, Mechanism::pa_residual}) {
    if (mechanism_name(m) == name) return m;
  }
  throw std::invalid_argument("unknown mechanism '" + std::string(name) + "' (basic, offset, ascn, pa)");
}

Operator parse_operator(std::string_view name) {
  for (Operator op : {Operator::dot, Operator::concatenation, Operator::summation, Operator::subtraction,
                      Operator::division, Operator::hadamard}) {
    if (operator_name(op) == name) return op;
  }
  throw std::invalid_argument("unknown operator '" + std::string(name) +
                              "' (dot, concat, sum, sub, div, hadamard)");
}

namespace {

template <typename T>
void check_tokens(const Tensor<T>& x, const char* what) {
  if (x.rank() != 3) throw DimensionError(std::string(what) + ": expected (B, S, D), got " + shape_str(x.shape()));
}

template <typename T>
Tensor<T> as_rows(const Tensor<T>& x) {  // (B, S, D) -> (B, S, 1, D)
  return reshape(x, {x.dim(0), x.dim(1), 1, x.dim(2)});
}

template <typename T>
Tensor<T> as_cols(const Tensor<T>& x) {  // (B, S, D) -> (B, 1, S, D)
  return reshape(x, {x.dim(0), 1, x.dim(1), x.dim(2)});
}

}  // namespace

template <typename T>
Qkv<T> qkv_project(const Tensor<T>& tokens, const Tensor<T>& wq, const Tensor<T>& wk, const Tensor<T>& wv) {
  check_tokens(tokens, "qkv_project");
  return {linear(tokens, wq, Tensor<T>()), linear(tokens, wk, Tensor<T>()), linear(tokens, wv, Tensor<T>())};
}

template <typename T>
AttentionOutput<T> scalar_attention(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value) {
  check_tokens(query, "scalar_attention");
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(query.dim(2)));
  const Tensor<T> scores = scale(matmul(query, transpose(key, 1, 2)), inv_sqrt);
  const Tensor<T> weights = softmax(scores, 2);
  return {matmul(weights, value), weights};
}

template <typename T>
Tensor<T> delta(const Tensor<T>& query, const Tensor<T>& key, Operator op) {
  check_tokens(query, "delta");
  if (query.shape() != key.shape()) {
    throw DimensionError("delta: query " + shape_str(query.shape()) + " vs key " + shape_str(key.shape()));
  }
  const Tensor<T> q = as_rows(query);
  const Tensor<T> k = as_cols(key);
  switch (op) {
    case Operator::subtraction: return sub(q, k);
    case Operator::summation: return add(q, k);
    case Operator::hadamard: return mul(q, k);
    case Operator::division: return div(q, k);
    case Operator::concatenation: {
      const Shape pair{query.dim(0), query.dim(1), query.dim(1), query.dim(2)};
      return concat<T>({broadcast_to(q, pair), broadcast_to(k, pair)}, 3);
    }
    case Operator::dot: break;
  }
  throw std::invalid_argument("delta: the dot operator has no pairwise vector form");
}

template <typename T>
Tensor<T> relative_positions(const Tensor<T>& positions) {
  check_tokens(positions, "relative_positions");
  return sub(as_rows(positions), as_cols(positions));
}

template <typename T>
Tensor<T> position_encode(const Tensor<T>& positions, const PositionMlp<T>& xi, Mode mode) {
  // xi's first layer is affine, so it is applied per point before pairing.
  const Tensor<T> projected = sub(as_rows(xi.first(positions)), as_cols(linear(positions, xi.first.weight, Tensor<T>())));
  return xi.second(relu(xi.norm(projected, mode)));
}

template <typename T>
Tensor<T> attention_logits(const Tensor<T>& query, const Tensor<T>& key, const AttentionMap<T>& tau, Operator op) {
  check_tokens(query, "attention_logits");
  const std::size_t d = query.dim(2);
  Tensor<T> hidden;
  switch (op) {
    case Operator::subtraction:
      hidden = sub(as_rows(tau.first(query)), as_cols(linear(key, tau.first.weight, Tensor<T>())));
      break;
    case Operator::summation:
      hidden = add(as_rows(tau.first(query)), as_cols(linear(key, tau.first.weight, Tensor<T>())));
      break;
    case Operator::concatenation: {
      const Tensor<T> wq = slice(tau.first.weight, 0, 0, d);
      const Tensor<T> wk = slice(tau.first.weight, 0, d, d);
      hidden = add(as_rows(linear(query, wq, tau.first.bias)), as_cols(linear(key, wk, Tensor<T>())));
      break;
    }
    case Operator::division:
    case Operator::hadamard:
      hidden = tau.first(delta(query, key, op));
      break;
    case Operator::dot:
      throw std::invalid_argument("attention_logits: the dot operator uses scalar attention");
  }
  return tau.second(relu(hidden));
}

template <typename T>
AttentionOutput<T> vector_attention(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value,
                                    const Tensor<T>& rho, const AttentionMap<T>& tau, Operator op) {
  check_tokens(value, "vector_attention");
  Tensor<T> logits = attention_logits(query, key, tau, op);
  if (rho.defined()) {
    if (rho.shape() != logits.shape()) {
      throw DimensionError("vector_attention: position encoding " + shape_str(rho.shape()) + " vs map " +
                           shape_str(logits.shape()));
    }
    logits = add(logits, rho);
  }
  Tensor<T> weights;
  Tensor<T> out = attention_aggregate(logits, value, &weights);
  return {out, weights};
}

template <typename T>
Tensor<T> offset_attention(const Tensor<T>& tokens, const Tensor<T>& attended, const Lbr<T>& lbr, Mode mode) {
  return add(lbr(sub(tokens, attended), mode), tokens);
}

template <typename T>
GflBlock<T>::GflBlock(ParamStore<T>& store, const std::string& prefix, AttentionConfig config, Rng& rng)
    : config_(config) {
  const std::size_t d = config_.width;
  if (d == 0) throw std::invalid_argument("attention width must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  wq_ = store.create(prefix + ".wq", {d, d}, uniform_values<T>(d * d, bound, rng));
  wk_ = store.create(prefix + ".wk", {d, d}, uniform_values<T>(d * d, bound, rng));
  wv_ = store.create(prefix + ".wv", {d, d}, uniform_values<T>(d * d, bound, rng));
  if (config_.vector_form()) {
    const std::size_t h = config_.tau_hidden();
    tau_.first = Linear<T>::create(store, prefix + ".tau.0", config_.delta_width(), h, true, rng);
    // Small output layer: the map starts close to uniform weights.
    tau_.second = Linear<T>::create(store, prefix + ".tau.1", h, d, true, rng, 0.1);
    if (config_.position_encoding) {
      PositionMlp<T> xi;
      xi.first = Linear<T>::create(store, prefix + ".xi.0", 3, d, true, rng);
      xi.norm = BatchNorm<T>::create(store, prefix + ".xi.bn", d);
      xi.second = Linear<T>::create(store, prefix + ".xi.1", d, d, true, rng);
      xi_ = std::move(xi);
    }
  }
  if (config_.mechanism == Mechanism::offset) lbr_ = Lbr<T>::create(store, prefix + ".lbr", d, d, rng);
}

template <typename T>
AttentionOutput<T> GflBlock<T>::attend(const Tensor<T>& tokens, const Tensor<T>& positions, Mode mode) const {
  check_tokens(tokens, "GFL block");
  if (tokens.dim(2) != config_.width) {
    throw DimensionError("GFL block: token width " + std::to_string(tokens.dim(2)) + " vs configured " +
                         std::to_string(config_.width));
  }
  const Qkv<T> qkv = qkv_project(tokens, wq_, wk_, wv_);
  if (!config_.vector_form()) return scalar_attention(qkv.query, qkv.key, qkv.value);
  Tensor<T> rho;
  if (xi_) {
    if (positions.rank() != 3 || positions.dim(0) != tokens.dim(0) || positions.dim(1) != tokens.dim(1)) {
      throw DimensionError("GFL block: positions " + shape_str(positions.shape()) + " for tokens " +
                           shape_str(tokens.shape()));
    }
    rho = position_encode(positions, *xi_, mode);
  }
  return vector_attention(qkv.query, qkv.key, qkv.value, rho, tau_, config_.op);
}

template <typename T>
Tensor<T> GflBlock<T>::forward(const Tensor<T>& tokens, const Tensor<T>& positions, Mode mode) const {
  const Tensor<T> attended = attend(tokens, positions, mode).features;
  switch (config_.mechanism) {
    case Mechanism::basic: return attended;
    case Mechanism::ascn_residual:
    case Mechanism::pa_residual: return add(attended, tokens);
    case Mechanism::offset: return offset_attention(tokens, attended, *lbr_, mode);
  }
  throw std::logic_error("unreachable");
}

#define CTN_INSTANTIATE(T)                                                                                 \
  template Qkv<T> qkv_project(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template AttentionOutput<T> scalar_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> delta(const Tensor<T>&, const Tensor<T>&, Operator);                                  \
  template Tensor<T> relative_positions(const Tensor<T>&);                                                 \
  template Tensor<T> position_encode(const Tensor<T>&, const PositionMlp<T>&, Mode);                       \
  template Tensor<T> attention_logits(const Tensor<T>&, const Tensor<T>&, const AttentionMap<T>&, Operator); \
  template AttentionOutput<T> vector_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                               const Tensor<T>&, const AttentionMap<T>&, Operator);        \
  template Tensor<T> offset_attention(const Tensor<T>&, const Tensor<T>&, const Lbr<T>&, Mode);            \
  template class GflBlock<T>;

CTN_INSTANTIATE(float)
CTN_INSTANTIATE(double)

#undef CTN_INSTANTIATE

}  // namespace ctn
