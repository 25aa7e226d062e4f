#pragma once

#include <cmath>
#include <vector>

#include "sitsmamba/rng.hpp"
#include "sitsmamba/tensor.hpp"

namespace testing {

using sitsmamba::Shape;
using TD = sitsmamba::Tensor<double>;
using TF = sitsmamba::Tensor<float>;

template <typename T = double>
sitsmamba::Tensor<T> random(Shape s, sitsmamba::Rng& rng, double lo = -1, double hi = 1, bool grad = false) {
  std::vector<T> v(sitsmamba::numel_of(s));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return sitsmamba::Tensor<T>(std::move(s), std::move(v), grad);
}

template <typename T>
std::vector<T> vals(const sitsmamba::Tensor<T>& t) {
  return {t.values().begin(), t.values().end()};
}

template <typename T>
std::vector<T> grads(const sitsmamba::Tensor<T>& t) {
  return {t.grad().begin(), t.grad().end()};
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace testing
