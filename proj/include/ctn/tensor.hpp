#pragma once

// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// Every op returns a fresh Tensor whose node remembers its parents and a
// closure that pushes the output gradient back into them. backward() sorts
// the reachable nodes topologically and runs those closures once each.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Training or inference behaviour for layers with state (batchnorm).
enum class Mode { train, eval };

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  /// Gradient storage, zero-filled on first use.
  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Writable view; only meaningful for leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  void zero_grad() { node_->grad.clear(); }

  /// Reverse sweep from a scalar output with seed 1.
  void backward() const;
  /// Reverse sweep with an explicit output gradient of matching size.
  void backward(std::span<const T> seed) const;

  /// Same values, no graph history.
  Tensor detach() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Nodes reachable from root that require gradients, parents before children.
template <typename T>
std::vector<detail::Node<T>*> topological_order(const Tensor<T>& root);

// Broadcasting arithmetic (trailing-aligned, extent 1 stretches).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// Throws DomainError if any divisor entry is exactly zero.
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

/// Batched matrix product over the last two axes; leading axes broadcast.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
/// x / sum(|x|) along axis; slices whose absolute sum is zero pass through.
template <typename T> Tensor<T> l1_normalize(const Tensor<T>& x, std::size_t axis);

/// Fused channel-wise attention: for logits (B, S, K, D) and values
/// (B, K, D), E = l1_normalize(softmax(logits, 2), 2) and
/// out(b, m, c) = sum_n E(b, m, n, c) * value(b, n, c). Matches the composite
/// of those ops; weights, when given, receives E without graph history.
template <typename T>
Tensor<T> attention_aggregate(const Tensor<T>& logits, const Tensor<T>& value, Tensor<T>* weights = nullptr);

template <typename T>
struct MaxResult {
  Tensor<T> values;
  std::vector<std::size_t> indices;  // argmax along the reduced axis, lowest index on ties
};

/// Maximum along axis (the axis is removed). Gradient flows to argmax only.
template <typename T> MaxResult<T> max_reduce(const Tensor<T>& x, std::size_t axis);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
/// Sum along axis (the axis is removed).
template <typename T> Tensor<T> sum(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
/// Selects entries along axis; backward scatter-adds so repeated indices accumulate.
template <typename T> Tensor<T> gather(const Tensor<T>& x, std::span<const std::size_t> indices, std::size_t axis);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
template <typename T> Tensor<T> transpose(const Tensor<T>& x, std::size_t axis0, std::size_t axis1);
template <typename T> Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape);

/// x (..., in) times W (in, out) plus optional bias (out).
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Per-channel normalization over every axis but the last. Train mode uses
/// biased batch statistics and folds them into the running averages.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormState<T>& state, Mode mode);

/// Mean softmax cross-entropy of logits (B, C) against integer labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels);

}  // namespace ctn
