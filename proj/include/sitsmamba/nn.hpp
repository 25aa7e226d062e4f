#pragma once

// Parameterized layers shared by the encoders and heads.

#include <string>
#include <vector>

#include "sitsmamba/ops.hpp"
#include "sitsmamba/rng.hpp"
#include "sitsmamba/tensor.hpp"

namespace sitsmamba {

/// Named handle on a model tensor. Non-trainable entries are state that
/// still belongs in a checkpoint (batchnorm running statistics).
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor = nullptr;
  bool trainable = true;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng, bool requires_grad = true) {
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

/// y = x W + b with W stored [in, out].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;  // undefined when the layer has none

  static Linear init(std::size_t in, std::size_t out, bool with_bias, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  void collect(const std::string& prefix, ParamList<T>& out);
};

/// Square odd-kernel convolution, padding kernel/2, stride 1.
template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]

  /// Kaiming-uniform (fan-in, ReLU gain) weights; bias uniform in +-1/sqrt(fan_in).
  static Conv2d init(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias); }
  void collect(const std::string& prefix, ParamList<T>& out);
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  static BatchNorm init(std::size_t channels);
  Tensor<T> operator()(const Tensor<T>& x, bool training) {
    return batchnorm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
  }
  void collect(const std::string& prefix, ParamList<T>& out);
};

template <typename T>
std::size_t count_trainable(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) {
    if (p.trainable) n += p.tensor->numel();
  }
  return n;
}

}  // namespace sitsmamba
