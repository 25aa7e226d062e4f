#pragma once

#include <cmath>
#include <stdexcept>

namespace sitsmamba {

/// Below this |delta * a| the input matrix uses the first-order series.
inline constexpr double kZohSeriesThreshold = 1e-6;

template <typename T>
inline T zoh_phi_series(T z) {
  return T(1) + z / T(2);
}

/// phi(z) = (exp(z) - 1) / z, the factor that turns delta*B into B_bar.
template <typename T>
inline T zoh_phi(T z) {
  if (std::abs(z) < T(kZohSeriesThreshold)) return zoh_phi_series(z);
  return std::expm1(z) / z;
}

/// d phi / dz. The closed form cancels badly near zero, so a Taylor
/// polynomial takes over below 1e-2.
template <typename T>
inline T zoh_phi_derivative(T z) {
  if (std::abs(z) < T(1e-2)) return T(0.5) + z / T(3) + z * z / T(8) + z * z * z / T(30);
  return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

template <typename T>
struct ZohPair {
  T a_bar;
  T b_bar;
};

/// Zero-order-hold discretization of one diagonal entry:
/// a_bar = exp(delta a), b_bar = (delta a)^-1 (exp(delta a) - 1) delta b.
template <typename T>
ZohPair<T> discretize_zoh(T a, T b, T delta) {
  if (!(delta > T(0))) throw std::invalid_argument("discretize_zoh: delta must be positive");
  const T z = delta * a;
  return {std::exp(z), zoh_phi(z) * delta * b};
}

/// Same discretization through the unguarded closed form (no series branch).
template <typename T>
ZohPair<T> discretize_zoh_exact(T a, T b, T delta) {
  if (!(delta > T(0))) throw std::invalid_argument("discretize_zoh: delta must be positive");
  const T z = delta * a;
  return {std::exp(z), (std::exp(z) - T(1)) / z * delta * b};
}

/// Series branch alone, exposed so its accuracy can be checked directly.
template <typename T>
ZohPair<T> discretize_zoh_series(T a, T b, T delta) {
  const T z = delta * a;
  return {std::exp(z), delta * b * zoh_phi_series(z)};
}

}  // namespace sitsmamba
