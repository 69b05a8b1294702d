#pragma once

// Global feature learning over the S sampled tokens of a module.
//
// Tokens Y (B, S, D) are projected to queries, keys and values. The scalar
// operator weights values by softmax(Q K^T / sqrt(D)); the vector operators
// build a per-channel map from a pairwise combination delta(q_m, k_n), an
// MLP tau and an optional learned encoding of relative positions, then
// normalize it over keys with softmax followed by l1 normalization.
// Mechanisms wrap the operator output: plain, residual (+Y), or offset
// LBR(Y - A(Y)) + Y.

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "ctn/layers.hpp"
#include "ctn/tensor.hpp"

namespace ctn {

enum class Mechanism { basic, offset, ascn_residual, pa_residual };
enum class Operator { dot, concatenation, summation, subtraction, division, hadamard };

std::string_view mechanism_name(Mechanism m);
std::string_view operator_name(Operator op);
/// Accepts the CLI spellings: basic/offset/ascn/pa and dot/concat/sum/sub/div/hadamard.
Mechanism parse_mechanism(std::string_view name);
Operator parse_operator(std::string_view name);

struct AttentionConfig {
  Mechanism mechanism = Mechanism::offset;
  Operator op = Operator::subtraction;
  bool position_encoding = true;
  std::size_t width = 0;
  std::size_t map_hidden = 0;  // hidden width of tau; 0 means width

  bool vector_form() const { return op != Operator::dot; }
  std::size_t tau_hidden() const { return map_hidden ? map_hidden : width; }
  /// Width entering tau: concatenation doubles the channels.
  std::size_t delta_width() const { return op == Operator::concatenation ? 2 * width : width; }
};

template <typename T>
struct Qkv {
  Tensor<T> query, key, value;
};

template <typename T>
struct AttentionOutput {
  Tensor<T> features;  // (B, S, D)
  Tensor<T> weights;   // scalar: (B, S, S); vector: (B, S, S, D)
};

/// Three bias-free projections of Y (B, S, D).
template <typename T>
Qkv<T> qkv_project(const Tensor<T>& tokens, const Tensor<T>& wq, const Tensor<T>& wk, const Tensor<T>& wv);

template <typename T>
AttentionOutput<T> scalar_attention(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value);

/// Pairwise map with entry (b, m, n) = delta(q_m, k_n): (B, S, S, D), or
/// (B, S, S, 2D) for concatenation. Throws for the dot operator.
template <typename T>
Tensor<T> delta(const Tensor<T>& query, const Tensor<T>& key, Operator op);

/// tau: linear -> ReLU -> linear over the channel axis.
template <typename T>
struct AttentionMap {
  Linear<T> first;
  Linear<T> second;

  Tensor<T> operator()(const Tensor<T>& x) const { return second(relu(first(x))); }
};

/// xi: linear(3 -> D) -> batchnorm -> ReLU -> linear(D -> D).
template <typename T>
struct PositionMlp {
  Linear<T> first;
  BatchNorm<T> norm;
  Linear<T> second;
};

/// Relative coordinates (P_m - P_n) for positions (B, S, 3) -> (B, S, S, 3).
template <typename T>
Tensor<T> relative_positions(const Tensor<T>& positions);

/// rho = xi(P (-) P): (B, S, S, D).
template <typename T>
Tensor<T> position_encode(const Tensor<T>& positions, const PositionMlp<T>& xi, Mode mode);

/// tau applied to delta(Q, K). For the linear combinations (sub, sum,
/// concat) tau's first layer is distributed over q and k before pairing,
/// which is exact and avoids an S*S*D-by-D product.
template <typename T>
Tensor<T> attention_logits(const Tensor<T>& query, const Tensor<T>& key, const AttentionMap<T>& tau, Operator op);

/// Vector attention: E = l1(softmax(tau(delta(Q, K)) + rho)) over keys, per
/// channel; output(m) = sum_n E(m, n) * V(n). rho may be undefined.
template <typename T>
AttentionOutput<T> vector_attention(const Tensor<T>& query, const Tensor<T>& key, const Tensor<T>& value,
                                    const Tensor<T>& rho, const AttentionMap<T>& tau, Operator op);

/// LBR(Y - attended) + Y.
template <typename T>
Tensor<T> offset_attention(const Tensor<T>& tokens, const Tensor<T>& attended, const Lbr<T>& lbr, Mode mode);

template <typename T>
class GflBlock {
 public:
  GflBlock(ParamStore<T>& store, const std::string& prefix, AttentionConfig config, Rng& rng);

  /// tokens (B, S, D), positions (B, S, 3).
  Tensor<T> forward(const Tensor<T>& tokens, const Tensor<T>& positions, Mode mode) const;
  /// The operator output A(Y) before the mechanism wraps it.
  AttentionOutput<T> attend(const Tensor<T>& tokens, const Tensor<T>& positions, Mode mode) const;

  const AttentionConfig& config() const { return config_; }
  const Tensor<T>& wq() const { return wq_; }
  const Tensor<T>& wk() const { return wk_; }
  const Tensor<T>& wv() const { return wv_; }
  const AttentionMap<T>& tau() const { return tau_; }
  const std::optional<PositionMlp<T>>& xi() const { return xi_; }
  const std::optional<Lbr<T>>& lbr() const { return lbr_; }

 private:
  AttentionConfig config_;
  Tensor<T> wq_, wk_, wv_;
  AttentionMap<T> tau_;
  std::optional<PositionMlp<T>> xi_;
  std::optional<Lbr<T>> lbr_;
};

}  // namespace ctn
