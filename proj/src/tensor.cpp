#include "ctn/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <type_traits>
#include <unordered_set>
#include <utility>

namespace ctn {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using NodeT = detail::Node<T>;

template <typename T>
using MatrixMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatrixMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T, typename Fn>
Tensor<T> record(Shape shape, std::vector<T> value,
                 std::initializer_list<std::shared_ptr<NodeT<T>>> inputs, Fn&& fn) {
  auto node = std::make_shared<NodeT<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& p : inputs) any = any || p->requires_grad;
    if (any) {
      node->requires_grad = true;
      node->parents.assign(inputs.begin(), inputs.end());
      node->backward = std::forward<Fn>(fn);
    }
  }
  return Tensor<T>(std::move(node));
}

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t d = shape.size(); d-- > 1;) strides[d - 1] = strides[d] * shape[d];
  return strides;
}

void check_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " invalid for shape " + shape_str(shape));
  }
}

// outer * extent * inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.extent = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

Shape remove_axis(const Shape& shape, std::size_t axis) {
  Shape out = shape;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
  bool same = false;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  Broadcast p;
  const std::size_t rank = std::max(a.size(), b.size());
  p.out.assign(rank, 1);
  p.stride_a.assign(rank, 0);
  p.stride_b.assign(rank, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t d = rank - 1 - i;
    const std::size_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcast-compatible");
    }
    p.out[d] = std::max(ea, eb);
    if (i < a.size() && ea != 1) p.stride_a[d] = sa[a.size() - 1 - i];
    if (i < b.size() && eb != 1) p.stride_b[d] = sb[b.size() - 1 - i];
  }
  p.same = (a == b);
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <typename F>
void for_each_pair(const Broadcast& p, F&& f) {
  const std::size_t total = shape_numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  const std::size_t rank = p.out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = p.out.back();
  const std::size_t step_a = p.stride_a.back();
  const std::size_t step_b = p.stride_b.back();
  // Constant inner strides let the compiler vectorize the common layouts.
  auto run = [&](std::size_t o, std::size_t ia, std::size_t ib, auto sa, auto sb) {
    for (std::size_t i = 0; i < inner; ++i) f(o + i, ia + i * sa, ib + i * sb);
  };
  using One = std::integral_constant<std::size_t, 1>;
  using Zero = std::integral_constant<std::size_t, 0>;
  std::vector<std::size_t> counter(rank, 0);
  std::size_t base_a = 0, base_b = 0, o = 0;
  for (std::size_t row = 0, rows = total / inner; row < rows; ++row, o += inner) {
    if (step_a == 1 && step_b == 1) {
      run(o, base_a, base_b, One{}, One{});
    } else if (step_a == 1 && step_b == 0) {
      run(o, base_a, base_b, One{}, Zero{});
    } else if (step_a == 0 && step_b == 1) {
      run(o, base_a, base_b, Zero{}, One{});
    } else {
      run(o, base_a, base_b, step_a, step_b);
    }
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++counter[d];
      base_a += p.stride_a[d];
      base_b += p.stride_b[d];
      if (counter[d] < p.out[d]) break;
      base_a -= p.stride_a[d] * p.out[d];
      base_b -= p.stride_b[d] * p.out[d];
      counter[d] = 0;
    }
  }
}

enum class BinaryOp { add, sub, mul, div };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryOp op) {
  Broadcast plan = plan_broadcast(a.shape(), b.shape());
  std::vector<T> out(shape_numel(plan.out));
  const T* av = a.data().data();
  const T* bv = b.data().data();
  T* ov = out.data();
  switch (op) {
    case BinaryOp::add:
      for_each_pair(plan, [&](std::size_t o, std::size_t i, std::size_t j) { ov[o] = av[i] + bv[j]; });
      break;
    case BinaryOp::sub:
      for_each_pair(plan, [&](std::size_t o, std::size_t i, std::size_t j) { ov[o] = av[i] - bv[j]; });
      break;
    case BinaryOp::mul:
      for_each_pair(plan, [&](std::size_t o, std::size_t i, std::size_t j) { ov[o] = av[i] * bv[j]; });
      break;
    case BinaryOp::div:
      for (T v : b.data()) {
        if (v == T(0)) throw DomainError("div: zero divisor");
      }
      for_each_pair(plan, [&](std::size_t o, std::size_t i, std::size_t j) { ov[o] = av[i] / bv[j]; });
      break;
  }
  Shape out_shape = plan.out;
  return record<T>(std::move(out_shape), std::move(out), {a.node(), b.node()},
                   [plan = std::move(plan), op](NodeT<T>& self) {
                     auto& pa = *self.parents[0];
                     auto& pb = *self.parents[1];
                     const T* g = self.grad.data();
                     const T* av = pa.value.data();
                     const T* bv = pb.value.data();
                     if (pa.requires_grad) {
                       T* ga = pa.grad_buffer().data();
                       switch (op) {
                         case BinaryOp::add:
                         case BinaryOp::sub:
                           for_each_pair(plan, [&](std::size_t o, std::size_t i, std::size_t) { ga[i] += g[o]; });
                           break;
                         case BinaryOp::mul:
                           for_each_pair(plan, [&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += g[o] * bv[j]; });
                           break;
                         case BinaryOp::div:
                           for_each_pair(plan, [&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += g[o] / bv[j]; });
                           break;
                       }
                     }
                     if (pb.requires_grad) {
                       T* gb = pb.grad_buffer().data();
                       switch (op) {
                         case BinaryOp::add:
                           for_each_pair(plan, [&](std::size_t o, std::size_t, std::size_t j) { gb[j] += g[o]; });
                           break;
                         case BinaryOp::sub:
                           for_each_pair(plan, [&](std::size_t o, std::size_t, std::size_t j) { gb[j] -= g[o]; });
                           break;
                         case BinaryOp::mul:
                           for_each_pair(plan, [&](std::size_t o, std::size_t i, std::size_t j) { gb[j] += g[o] * av[i]; });
                           break;
                         case BinaryOp::div:
                           for_each_pair(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                             gb[j] -= g[o] * av[i] / (bv[j] * bv[j]);
                           });
                           break;
                       }
                     }
                   });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
  }
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->value = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value, bool requires_grad) {
  return Tensor(shape, std::vector<T>(shape_numel(shape), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("at(): index rank mismatch for " + shape_str(shape()));
  const auto strides = contiguous_strides(shape());
  std::size_t offset = 0, d = 0;
  for (std::size_t i : index) {
    if (i >= shape()[d]) throw std::out_of_range("at(): index out of range");
    offset += i * strides[d++];
  }
  return node_->value[offset];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

template <typename T>
std::vector<detail::Node<T>*> topological_order(const Tensor<T>& root) {
  std::vector<detail::Node<T>*> order;
  if (!root.defined() || !root.requires_grad()) return order;
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename T>
void Tensor<T>::backward() const {
  if (size() != 1) {
    throw DimensionError("backward() without a seed needs a scalar output, got shape " +
                         shape_str(shape()));
  }
  const T one = T(1);
  backward(std::span<const T>(&one, 1));
}

template <typename T>
void Tensor<T>::backward(std::span<const T> seed) const {
  if (seed.size() != size()) {
    throw DimensionError("backward seed of size " + std::to_string(seed.size()) +
                         " for output shape " + shape_str(shape()));
  }
  if (!requires_grad()) return;
  const auto order = topological_order(*this);
  auto g = node_->grad_buffer();
  for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// Arithmetic

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryOp::add); }
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryOp::sub); }
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryOp::mul); }
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinaryOp::div); }

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2]) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 2], k = a.shape().back(), n = b.shape().back();
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Broadcast plan = plan_broadcast(batch_a, batch_b);
  plan.same = false;
  Shape out_shape = plan.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(shape_numel(out_shape));
  for_each_pair(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
    ConstMatrixMap<T> am(a.data().data() + i * m * k, m, k);
    ConstMatrixMap<T> bm(b.data().data() + j * k * n, k, n);
    MatrixMap<T>(out.data() + o * m * n, m, n).noalias() = am * bm;
  });
  return record<T>(std::move(out_shape), std::move(out), {a.node(), b.node()},
                   [plan, m, k, n](NodeT<T>& self) {
                     auto& pa = *self.parents[0];
                     auto& pb = *self.parents[1];
                     for_each_pair(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                       ConstMatrixMap<T> g(self.grad.data() + o * m * n, m, n);
                       if (pa.requires_grad) {
                         ConstMatrixMap<T> bm(pb.value.data() + j * k * n, k, n);
                         MatrixMap<T>(pa.grad_buffer().data() + i * m * k, m, k).noalias() +=
                             g * bm.transpose();
                       }
                       if (pb.requires_grad) {
                         ConstMatrixMap<T> am(pa.value.data() + i * m * k, m, k);
                         MatrixMap<T>(pb.grad_buffer().data() + j * k * n, k, n).noalias() +=
                             am.transpose() * g;
                       }
                     });
                   });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  return record<T>(x.shape(), std::move(out), {x.node()}, [](NodeT<T>& self) {
    auto& p = *self.parents[0];
    T* g = p.grad_buffer().data();
    const T* x = p.value.data();
    const T* gy = self.grad.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += x[i] > T(0) ? gy[i] : T(0);
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v *= factor;
  return record<T>(x.shape(), std::move(out), {x.node()}, [factor](NodeT<T>& self) {
    T* g = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  check_axis(x.shape(), axis, "softmax");
  const AxisSplit s = split_at(x.shape(), axis);
  std::vector<T> out(x.size());
  const T* xv = x.data().data();
  std::vector<T> peak(s.inner), total(s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const std::size_t base = o * s.extent * s.inner;
    std::copy_n(xv + base, s.inner, peak.begin());
    for (std::size_t k = 1; k < s.extent; ++k) {
      const T* row = xv + base + k * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) peak[i] = std::max(peak[i], row[i]);
    }
    std::fill(total.begin(), total.end(), T(0));
    for (std::size_t k = 0; k < s.extent; ++k) {
      const T* row = xv + base + k * s.inner;
      T* dst = out.data() + base + k * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) {
        dst[i] = std::exp(row[i] - peak[i]);
        total[i] += dst[i];
      }
    }
    for (std::size_t k = 0; k < s.extent; ++k) {
      T* dst = out.data() + base + k * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] /= total[i];
    }
  }
  return record<T>(x.shape(), std::move(out), {x.node()}, [s](NodeT<T>& self) {
    T* gx = self.parents[0]->grad_buffer().data();
    const T* y = self.value.data();
    const T* g = self.grad.data();
    std::vector<T> dot(s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
      const std::size_t base = o * s.extent * s.inner;
      std::fill(dot.begin(), dot.end(), T(0));
      for (std::size_t k = 0; k < s.extent; ++k) {
        const std::size_t r = base + k * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dot[i] += g[r + i] * y[r + i];
      }
      for (std::size_t k = 0; k < s.extent; ++k) {
        const std::size_t r = base + k * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) gx[r + i] += y[r + i] * (g[r + i] - dot[i]);
      }
    }
  });
}

template <typename T>
Tensor<T> l1_normalize(const Tensor<T>& x, std::size_t axis) {
  check_axis(x.shape(), axis, "l1_normalize");
  const AxisSplit s = split_at(x.shape(), axis);
  const T* xv = x.data().data();
  std::vector<T> norms(s.outer * s.inner, T(0));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.extent; ++k) {
      const T* row = xv + (o * s.extent + k) * s.inner;
      T* acc = norms.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) acc[i] += std::abs(row[i]);
    }
  }
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < s.extent; ++k) {
      const std::size_t r = (o * s.extent + k) * s.inner;
      const T* acc = norms.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) {
        out[r + i] = acc[i] == T(0) ? xv[r + i] : xv[r + i] / acc[i];
      }
    }
  }
  return record<T>(x.shape(), std::move(out), {x.node()},
                   [s, norms = std::move(norms)](NodeT<T>& self) {
                     auto& p = *self.parents[0];
                     T* gx = p.grad_buffer().data();
                     const T* xv = p.value.data();
                     const T* g = self.grad.data();
                     std::vector<T> dot(s.inner);
                     for (std::size_t o = 0; o < s.outer; ++o) {
                       const T* acc = norms.data() + o * s.inner;
                       std::fill(dot.begin(), dot.end(), T(0));
                       for (std::size_t k = 0; k < s.extent; ++k) {
                         const std::size_t r = (o * s.extent + k) * s.inner;
                         for (std::size_t i = 0; i < s.inner; ++i) dot[i] += g[r + i] * xv[r + i];
                       }
                       for (std::size_t k = 0; k < s.extent; ++k) {
                         const std::size_t r = (o * s.extent + k) * s.inner;
                         for (std::size_t i = 0; i < s.inner; ++i) {
                           if (acc[i] == T(0)) {
                             gx[r + i] += g[r + i];
                             continue;
                           }
                           const T v = xv[r + i];
                           const T sign = v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
                           gx[r + i] += g[r + i] / acc[i] - sign * dot[i] / (acc[i] * acc[i]);
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> attention_aggregate(const Tensor<T>& logits, const Tensor<T>& value, Tensor<T>* weights) {
  if (logits.rank() != 4 || value.rank() != 3 || logits.dim(0) != value.dim(0) || logits.dim(2) != value.dim(1) ||
      logits.dim(3) != value.dim(2)) {
    throw DimensionError("attention_aggregate: logits " + shape_str(logits.shape()) + " with values " +
                         shape_str(value.shape()));
  }
  const std::size_t batch = logits.dim(0), rows = logits.dim(1), keys = logits.dim(2), d = logits.dim(3);
  const T* z = logits.data().data();
  const T* v = value.data().data();
  std::vector<T> e(logits.size());
  std::vector<T> norm(batch * rows * d);  // l1 norm of the softmax row
  std::vector<T> out(batch * rows * d, T(0));
  std::vector<T> peak(d), total(d);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t m = 0; m < rows; ++m) {
      const std::size_t base = (b * rows + m) * keys * d;
      std::copy_n(z + base, d, peak.begin());
      for (std::size_t n = 1; n < keys; ++n) {
        const T* row = z + base + n * d;
        for (std::size_t c = 0; c < d; ++c) peak[c] = std::max(peak[c], row[c]);
      }
      std::fill(total.begin(), total.end(), T(0));
      for (std::size_t n = 0; n < keys; ++n) {
        const T* row = z + base + n * d;
        T* dst = e.data() + base + n * d;
        for (std::size_t c = 0; c < d; ++c) {
          dst[c] = std::exp(row[c] - peak[c]);
          total[c] += dst[c];
        }
      }
      T* a = norm.data() + (b * rows + m) * d;
      std::fill(a, a + d, T(0));
      for (std::size_t n = 0; n < keys; ++n) {
        T* dst = e.data() + base + n * d;
        for (std::size_t c = 0; c < d; ++c) {
          dst[c] /= total[c];
          a[c] += std::abs(dst[c]);
        }
      }
      T* o = out.data() + (b * rows + m) * d;
      for (std::size_t n = 0; n < keys; ++n) {
        T* dst = e.data() + base + n * d;
        const T* vn = v + (b * keys + n) * d;
        for (std::size_t c = 0; c < d; ++c) {
          dst[c] /= a[c];  // a >= the row maximum of the softmax, so never zero
          o[c] += dst[c] * vn[c];
        }
      }
    }
  }
  Tensor<T> e_tensor(logits.shape(), std::move(e));
  if (weights) *weights = e_tensor;
  return record<T>(
      {batch, rows, d}, std::move(out), {logits.node(), value.node()},
      [batch, rows, keys, d, e_node = e_tensor.node(), norm = std::move(norm)](NodeT<T>& self) {
        auto& pz = *self.parents[0];
        auto& pv = *self.parents[1];
        const T* e = e_node->value.data();
        const T* v = pv.value.data();
        T* gz = pz.requires_grad ? pz.grad_buffer().data() : nullptr;
        T* gv = pv.requires_grad ? pv.grad_buffer().data() : nullptr;
        std::vector<T> dot1(d), dot2(d), ds(keys * d);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t m = 0; m < rows; ++m) {
            const std::size_t base = (b * rows + m) * keys * d;
            const T* g = self.grad.data() + (b * rows + m) * d;
            const T* a = norm.data() + (b * rows + m) * d;
            if (gv) {
              for (std::size_t n = 0; n < keys; ++n) {
                const T* en = e + base + n * d;
                T* gvn = gv + (b * keys + n) * d;
                for (std::size_t c = 0; c < d; ++c) gvn[c] += g[c] * en[c];
              }
            }
            if (!gz) continue;
            // dE = g * V; back through l1 (s = E * a) then softmax.
            std::fill(dot1.begin(), dot1.end(), T(0));
            for (std::size_t n = 0; n < keys; ++n) {
              const T* en = e + base + n * d;
              const T* vn = v + (b * keys + n) * d;
              for (std::size_t c = 0; c < d; ++c) dot1[c] += g[c] * vn[c] * en[c] * a[c];
            }
            std::fill(dot2.begin(), dot2.end(), T(0));
            for (std::size_t n = 0; n < keys; ++n) {
              const T* en = e + base + n * d;
              const T* vn = v + (b * keys + n) * d;
              T* dsn = ds.data() + n * d;
              for (std::size_t c = 0; c < d; ++c) {
                const T s = en[c] * a[c];
                const T sign = s > T(0) ? T(1) : T(0);
                dsn[c] = g[c] * vn[c] / a[c] - sign * dot1[c] / (a[c] * a[c]);
                dot2[c] += dsn[c] * s;
              }
            }
            for (std::size_t n = 0; n < keys; ++n) {
              const T* en = e + base + n * d;
              const T* dsn = ds.data() + n * d;
              T* gzn = gz + base + n * d;
              for (std::size_t c = 0; c < d; ++c) {
                gzn[c] += en[c] * a[c] * (dsn[c] - dot2[c]);
              }
            }
          }
        }
      });
}

template <typename T>
MaxResult<T> max_reduce(const Tensor<T>& x, std::size_t axis) {
  check_axis(x.shape(), axis, "max_reduce");
  const AxisSplit s = split_at(x.shape(), axis);
  const T* xv = x.data().data();
  std::vector<T> out(s.outer * s.inner);
  std::vector<std::size_t> arg(s.outer * s.inner, 0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const std::size_t base = o * s.extent * s.inner;
    T* best = out.data() + o * s.inner;
    std::size_t* where = arg.data() + o * s.inner;
    std::copy_n(xv + base, s.inner, best);
    for (std::size_t k = 1; k < s.extent; ++k) {
      const T* row = xv + base + k * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) {
        if (row[i] > best[i]) {
          best[i] = row[i];
          where[i] = k;
        }
      }
    }
  }
  MaxResult<T> result;
  result.indices = arg;
  result.values = record<T>(remove_axis(x.shape(), axis), std::move(out), {x.node()},
                            [s, arg = std::move(arg)](NodeT<T>& self) {
                              T* gx = self.parents[0]->grad_buffer().data();
                              for (std::size_t o = 0; o < s.outer; ++o) {
                                for (std::size_t i = 0; i < s.inner; ++i) {
                                  const std::size_t r = o * s.inner + i;
                                  gx[(o * s.extent + arg[r]) * s.inner + i] += self.grad[r];
                                }
                              }
                            });
  return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return record<T>(Shape{}, std::vector<T>{total}, {x.node()}, [](NodeT<T>& self) {
    auto g = self.parents[0]->grad_buffer();
    for (T& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
  check_axis(x.shape(), axis, "sum");
  const AxisSplit s = split_at(x.shape(), axis);
  const T* xv = x.data().data();
  std::vector<T> out(s.outer * s.inner, T(0));
  for (std::size_t o = 0; o < s.outer; ++o) {
    T* acc = out.data() + o * s.inner;
    for (std::size_t k = 0; k < s.extent; ++k) {
      const T* row = xv + (o * s.extent + k) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) acc[i] += row[i];
    }
  }
  return record<T>(remove_axis(x.shape(), axis), std::move(out), {x.node()}, [s](NodeT<T>& self) {
    T* gx = self.parents[0]->grad_buffer().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      const T* g = self.grad.data() + o * s.inner;
      for (std::size_t k = 0; k < s.extent; ++k) {
        T* row = gx + (o * s.extent + k) * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) row[i] += g[i];
      }
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  check_axis(first, axis, "concat");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    bool ok = p.rank() == first.size();
    for (std::size_t d = 0; ok && d < first.size(); ++d) ok = d == axis || p.shape()[d] == first[d];
    if (!ok) {
      throw DimensionError("concat: " + shape_str(p.shape()) + " does not match " +
                           shape_str(first) + " off axis " + std::to_string(axis));
    }
    extents.push_back(p.shape()[axis]);
    out_shape[axis] += p.shape()[axis];
  }
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<T> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const std::size_t chunk = extents[pi] * s.inner;
    const T* src = parts[pi].data().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(src + o * chunk, chunk, out.data() + o * s.extent * s.inner + offset);
    }
    offset += chunk;
  }

  auto node = std::make_shared<NodeT<T>>();
  node->shape = std::move(out_shape);
  node->value = std::move(out);
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (grad_enabled() && any) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backward = [s, extents](NodeT<T>& self) {
      std::size_t off = 0;
      for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
        const std::size_t chunk = extents[pi] * s.inner;
        auto& p = *self.parents[pi];
        if (p.requires_grad) {
          T* g = p.grad_buffer().data();
          for (std::size_t o = 0; o < s.outer; ++o) {
            const T* src = self.grad.data() + o * s.extent * s.inner + off;
            for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += src[i];
          }
        }
        off += chunk;
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  check_axis(x.shape(), axis, "slice");
  if (length == 0 || start + length > x.shape()[axis]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") outside " + shape_str(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const std::size_t chunk = length * s.inner;
  std::vector<T> out(s.outer * chunk);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data().data() + (o * s.extent + start) * s.inner, chunk, out.data() + o * chunk);
  }
  return record<T>(std::move(out_shape), std::move(out), {x.node()},
                   [s, start, chunk](NodeT<T>& self) {
                     T* g = self.parents[0]->grad_buffer().data();
                     for (std::size_t o = 0; o < s.outer; ++o) {
                       T* dst = g + (o * s.extent + start) * s.inner;
                       const T* src = self.grad.data() + o * chunk;
                       for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                     }
                   });
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::span<const std::size_t> indices, std::size_t axis) {
  check_axis(x.shape(), axis, "gather");
  if (indices.empty()) throw DimensionError("gather: empty index list");
  const AxisSplit s = split_at(x.shape(), axis);
  for (std::size_t idx : indices) {
    if (idx >= s.extent) {
      throw std::out_of_range("gather: index " + std::to_string(idx) + " out of range for extent " +
                              std::to_string(s.extent));
    }
  }
  Shape out_shape = x.shape();
  out_shape[axis] = indices.size();
  const std::size_t m = indices.size();
  std::vector<T> out(s.outer * m * s.inner);
  const T* xv = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < m; ++j) {
      std::copy_n(xv + (o * s.extent + indices[j]) * s.inner, s.inner,
                  out.data() + (o * m + j) * s.inner);
    }
  }
  return record<T>(std::move(out_shape), std::move(out), {x.node()},
                   [s, idx = std::vector<std::size_t>(indices.begin(), indices.end())](NodeT<T>& self) {
                     T* g = self.parents[0]->grad_buffer().data();
                     const std::size_t m = idx.size();
                     for (std::size_t o = 0; o < s.outer; ++o) {
                       for (std::size_t j = 0; j < m; ++j) {
                         T* dst = g + (o * s.extent + idx[j]) * s.inner;
                         const T* src = self.grad.data() + (o * m + j) * s.inner;
                         for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
                       }
                     }
                   });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (shape_numel(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return record<T>(shape, std::move(out), {x.node()}, [](NodeT<T>& self) {
    T* g = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::size_t axis0, std::size_t axis1) {
  check_axis(x.shape(), axis0, "transpose");
  check_axis(x.shape(), axis1, "transpose");
  Shape out_shape = x.shape();
  std::swap(out_shape[axis0], out_shape[axis1]);
  auto src_strides = contiguous_strides(x.shape());
  std::swap(src_strides[axis0], src_strides[axis1]);
  // Source offset for every output position.
  const std::size_t total = x.size();
  std::vector<std::size_t> source(total);
  std::vector<std::size_t> counter(out_shape.size(), 0);
  std::size_t offset = 0;
  for (std::size_t o = 0; o < total; ++o) {
    source[o] = offset;
    for (std::size_t d = out_shape.size(); d-- > 0;) {
      ++counter[d];
      offset += src_strides[d];
      if (counter[d] < out_shape[d]) break;
      offset -= src_strides[d] * out_shape[d];
      counter[d] = 0;
    }
  }
  std::vector<T> out(total);
  for (std::size_t o = 0; o < total; ++o) out[o] = x.data()[source[o]];
  return record<T>(std::move(out_shape), std::move(out), {x.node()},
                   [source = std::move(source)](NodeT<T>& self) {
                     T* g = self.parents[0]->grad_buffer().data();
                     for (std::size_t o = 0; o < source.size(); ++o) g[source[o]] += self.grad[o];
                   });
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  Broadcast plan = plan_broadcast(x.shape(), shape);
  if (plan.out != shape) {
    throw DimensionError("broadcast_to: " + shape_str(x.shape()) + " cannot expand to " +
                         shape_str(shape));
  }
  plan.same = x.shape() == shape;
  std::vector<T> out(shape_numel(shape));
  const T* xv = x.data().data();
  for_each_pair(plan, [&](std::size_t o, std::size_t i, std::size_t) { out[o] = xv[i]; });
  return record<T>(shape, std::move(out), {x.node()}, [plan](NodeT<T>& self) {
    T* g = self.parents[0]->grad_buffer().data();
    for_each_pair(plan, [&](std::size_t o, std::size_t i, std::size_t) { g[i] += self.grad[o]; });
  });
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.shape().back() != weight.shape()[0]) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " against weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t in = weight.shape()[0], out_dim = weight.shape()[1];
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.shape()[0] != out_dim)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " against weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  std::vector<T> out(rows * out_dim);
  MatrixMap<T> y(out.data(), rows, out_dim);
  y.noalias() = ConstMatrixMap<T>(x.data().data(), rows, in) *
                ConstMatrixMap<T>(weight.data().data(), in, out_dim);
  if (has_bias) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.data().data(), out_dim);
    y.rowwise() += b;
  }
  auto fn = [rows, in, out_dim, has_bias](NodeT<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    ConstMatrixMap<T> g(self.grad.data(), rows, out_dim);
    if (px.requires_grad) {
      MatrixMap<T>(px.grad_buffer().data(), rows, in).noalias() +=
          g * ConstMatrixMap<T>(pw.value.data(), in, out_dim).transpose();
    }
    if (pw.requires_grad) {
      MatrixMap<T>(pw.grad_buffer().data(), in, out_dim).noalias() +=
          ConstMatrixMap<T>(px.value.data(), rows, in).transpose() * g;
    }
    if (has_bias && self.parents[2]->requires_grad) {
      // Plain row loop: Eigen's vectorized reduction order depends on buffer
      // alignment, which would make training runs differ in the last bit.
      auto gb = self.parents[2]->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* row = self.grad.data() + r * out_dim;
        for (std::size_t c = 0; c < out_dim; ++c) gb[c] += row[c];
      }
    }
  };
  if (has_bias) {
    return record<T>(std::move(out_shape), std::move(out), {x.node(), weight.node(), bias.node()}, fn);
  }
  return record<T>(std::move(out_shape), std::move(out), {x.node(), weight.node()}, fn);
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    BatchNormState<T>& state, Mode mode) {
  const std::size_t channels = x.shape().back();
  if (gamma.size() != channels || beta.size() != channels || state.running_mean.size() != channels) {
    throw DimensionError("batchnorm: input " + shape_str(x.shape()) + " against " +
                         std::to_string(gamma.size()) + " channel parameters");
  }
  const std::size_t rows = x.size() / channels;
  if (mode == Mode::train && rows < 2) {
    throw DimensionError("batchnorm: train mode needs at least 2 values per channel, input " +
                         shape_str(x.shape()));
  }
  const T* xv = x.data().data();
  std::vector<T> mu(channels), inv_std(channels);
  if (mode == Mode::train) {
    std::vector<double> acc(channels, 0.0), acc2(channels, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < channels; ++c) acc[c] += xv[r * channels + c];
    }
    for (std::size_t c = 0; c < channels; ++c) acc[c] /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < channels; ++c) {
        const double d = xv[r * channels + c] - acc[c];
        acc2[c] += d * d;
      }
    }
    const T m = state.momentum;
    for (std::size_t c = 0; c < channels; ++c) {
      const double var = acc2[c] / static_cast<double>(rows);
      mu[c] = static_cast<T>(acc[c]);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
      const double unbiased = acc2[c] / static_cast<double>(rows - 1);
      state.running_mean[c] = (T(1) - m) * state.running_mean[c] + m * static_cast<T>(acc[c]);
      state.running_var[c] = (T(1) - m) * state.running_var[c] + m * static_cast<T>(unbiased);
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = state.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(state.running_var[c] + state.eps);
    }
  }
  std::vector<T> xhat(x.size()), out(x.size());
  const T* gv = gamma.data().data();
  const T* bv = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t i = r * channels + c;
      xhat[i] = (xv[i] - mu[c]) * inv_std[c];
      out[i] = gv[c] * xhat[i] + bv[c];
    }
  }
  const bool batch_stats = mode == Mode::train;
  return record<T>(x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
                   [rows, channels, batch_stats, xhat = std::move(xhat),
                    inv_std = std::move(inv_std)](NodeT<T>& self) {
                     auto& px = *self.parents[0];
                     auto& pg = *self.parents[1];
                     auto& pb = *self.parents[2];
                     const T* g = self.grad.data();
                     std::vector<T> sum_g(channels, T(0)), sum_gx(channels, T(0));
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t c = 0; c < channels; ++c) {
                         const std::size_t i = r * channels + c;
                         sum_g[c] += g[i];
                         sum_gx[c] += g[i] * xhat[i];
                       }
                     }
                     if (pg.requires_grad) {
                       T* gg = pg.grad_buffer().data();
                       for (std::size_t c = 0; c < channels; ++c) gg[c] += sum_gx[c];
                     }
                     if (pb.requires_grad) {
                       T* gb = pb.grad_buffer().data();
                       for (std::size_t c = 0; c < channels; ++c) gb[c] += sum_g[c];
                     }
                     if (px.requires_grad) {
                       T* gx = px.grad_buffer().data();
                       const T* gamma = pg.value.data();
                       const T n = static_cast<T>(rows);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t c = 0; c < channels; ++c) {
                           const std::size_t i = r * channels + c;
                           const T k = gamma[c] * inv_std[c];
                           if (batch_stats) {
                             gx[i] += k * (g[i] - sum_g[c] / n - xhat[i] * sum_gx[c] / n);
                           } else {
                             gx[i] += k * g[i];
                           }
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.shape()[0] != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
  for (std::size_t label : labels) {
    if (label >= classes) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(label) + " outside " +
                              std::to_string(classes) + " classes");
    }
  }
  std::vector<T> prob(logits.size());
  T total = T(0);
  const T* z = logits.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = z + b * classes;
    const T peak = *std::max_element(row, row + classes);
    T norm = T(0);
    for (std::size_t c = 0; c < classes; ++c) {
      prob[b * classes + c] = std::exp(row[c] - peak);
      norm += prob[b * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) prob[b * classes + c] /= norm;
    total += std::log(norm) + peak - row[labels[b]];
  }
  return record<T>(Shape{}, std::vector<T>{total / static_cast<T>(batch)}, {logits.node()},
                   [batch, classes, prob = std::move(prob),
                    lab = std::vector<std::size_t>(labels.begin(), labels.end())](NodeT<T>& self) {
                     T* g = self.parents[0]->grad_buffer().data();
                     const T k = self.grad[0] / static_cast<T>(batch);
                     for (std::size_t b = 0; b < batch; ++b) {
                       for (std::size_t c = 0; c < classes; ++c) {
                         const T target = c == lab[b] ? T(1) : T(0);
                         g[b * classes + c] += k * (prob[b * classes + c] - target);
                       }
                     }
                   });
}

#define CTN_INSTANTIATE(T)                                                                       \
  template class Tensor<T>;                                                                      \
  template std::vector<detail::Node<T>*> topological_order(const Tensor<T>&);                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> relu(const Tensor<T>&);                                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                 \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> l1_normalize(const Tensor<T>&, std::size_t);                                \
  template Tensor<T> attention_aggregate(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);            \
  template MaxResult<T> max_reduce(const Tensor<T>&, std::size_t);                               \
  template Tensor<T> sum(const Tensor<T>&);                                                      \
  template Tensor<T> sum(const Tensor<T>&, std::size_t);                                         \
  template Tensor<T> mean(const Tensor<T>&);                                                     \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                         \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);             \
  template Tensor<T> gather(const Tensor<T>&, std::span<const std::size_t>, std::size_t);        \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                    \
  template Tensor<T> transpose(const Tensor<T>&, std::size_t, std::size_t);                      \
  template Tensor<T> broadcast_to(const Tensor<T>&, const Shape&);                               \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> batchnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                               BatchNormState<T>&, Mode);                                        \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::size_t>);

CTN_INSTANTIATE(float)
CTN_INSTANTIATE(double)

#undef CTN_INSTANTIATE

}  // namespace ctn
