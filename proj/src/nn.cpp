#include "sitsmamba/nn.hpp"

#include <cmath>

namespace sitsmamba {

template <typename T>
Linear<T> Linear<T>::init(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = uniform_tensor<T>({in, out}, bound, rng);
  if (with_bias) l.bias = uniform_tensor<T>({out}, bound, rng);
  return l;
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".weight", &weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", &bias, true});
}

template <typename T>
Conv2d<T> Conv2d<T>::init(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng) {
  const double fan_in = static_cast<double>(in * kernel * kernel);
  Conv2d c;
  c.weight = uniform_tensor<T>({out, in, kernel, kernel}, std::sqrt(6.0 / fan_in), rng);
  c.bias = uniform_tensor<T>({out}, 1.0 / std::sqrt(fan_in), rng);
  return c;
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".weight", &weight, true});
  out.push_back({prefix + ".bias", &bias, true});
}

template <typename T>
BatchNorm<T> BatchNorm<T>::init(std::size_t channels) {
  BatchNorm b;
  b.gamma = Tensor<T>::full({channels}, T(1), true);
  b.beta = Tensor<T>::zeros({channels}, true);
  b.running_mean = Tensor<T>::zeros({channels});
  b.running_var = Tensor<T>::full({channels}, T(1));
  return b;
}

template <typename T>
void BatchNorm<T>::collect(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".gamma", &gamma, true});
  out.push_back({prefix + ".beta", &beta, true});
  out.push_back({prefix + ".running_mean", &running_mean, false});
  out.push_back({prefix + ".running_var", &running_var, false});
}

template struct Linear<float>;
template struct Linear<double>;
template struct Conv2d<float>;
template struct Conv2d<double>;
template struct BatchNorm<float>;
template struct BatchNorm<double>;

}  // namespace sitsmamba
