#pragma once

// Parameter storage and the small layer vocabulary shared by every block:
// linear maps, batch normalization and the linear+BN+ReLU ("LBR") composite.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ctn/tensor.hpp"

namespace ctn {

/// Owns every learnable tensor and batchnorm buffer of a model, keyed by
/// stable dotted path names. Handles returned by create() share storage
/// with the store, so optimizer updates are visible to the layers.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Tensor<T> create(const std::string& name, Shape shape, std::vector<T> values) {
    if (params_.count(name)) throw std::logic_error("duplicate parameter " + name);
    Tensor<T> t(std::move(shape), std::move(values), true);
    params_.emplace(name, t);
    return t;
  }

  BatchNormState<T>* create_norm(const std::string& name, std::size_t channels) {
    auto [it, fresh] = norms_.emplace(name, BatchNormState<T>(channels));
    if (!fresh) throw std::logic_error("duplicate batchnorm " + name);
    return &it->second;
  }

  std::map<std::string, Tensor<T>>& params() { return params_; }
  const std::map<std::string, Tensor<T>>& params() const { return params_; }
  std::map<std::string, BatchNormState<T>>& norms() { return norms_; }
  const std::map<std::string, BatchNormState<T>>& norms() const { return norms_; }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& [name, t] : params_) total += t.size();
    return total;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

 private:
  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, BatchNormState<T>> norms_;
};

using Rng = std::mt19937_64;

/// Uniform(-bound, bound) values drawn in double so float and double models
/// built from the same seed start from the same numbers.
template <typename T>
std::vector<T> uniform_values(std::size_t count, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> out(count);
  for (T& v : out) v = static_cast<T>(dist(rng));
  return out;
}

template <typename T>
struct Linear {
  Tensor<T> weight;  // (in, out)
  Tensor<T> bias;    // (out) or undefined

  /// Default init: weights and bias uniform in +-gain/sqrt(in).
  static Linear create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                       bool with_bias, Rng& rng, double gain = 1.0) {
    const double bound = gain / std::sqrt(static_cast<double>(in));
    Linear layer;
    layer.weight = store.create(name + ".weight", {in, out}, uniform_values<T>(in * out, bound, rng));
    if (with_bias) layer.bias = store.create(name + ".bias", {out}, std::vector<T>(out, T(0)));
    return layer;
  }

  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormState<T>* state = nullptr;

  static BatchNorm create(ParamStore<T>& store, const std::string& name, std::size_t channels) {
    BatchNorm bn;
    bn.gamma = store.create(name + ".gamma", {channels}, std::vector<T>(channels, T(1)));
    bn.beta = store.create(name + ".beta", {channels}, std::vector<T>(channels, T(0)));
    bn.state = store.create_norm(name, channels);
    return bn;
  }

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) const {
    return batchnorm(x, gamma, beta, *state, mode);
  }
};

/// Linear -> batchnorm -> ReLU.
template <typename T>
struct Lbr {
  Linear<T> fc;
  BatchNorm<T> bn;

  static Lbr create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                    Rng& rng) {
    Lbr layer;
    layer.fc = Linear<T>::create(store, name + ".fc", in, out, true, rng);
    layer.bn = BatchNorm<T>::create(store, name + ".bn", out);
    return layer;
  }

  Tensor<T> operator()(const Tensor<T>& x, Mode mode) const { return relu(bn(fc(x), mode)); }
};

}  // namespace ctn
