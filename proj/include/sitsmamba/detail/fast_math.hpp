#pragma once

// Branch-free exp / expm1 that vectorize inside `omp simd` loops. Range
// reduction exp(z) = 2^k exp(r), |r| <= ln2/2, with a Taylor polynomial;
// the small-argument expm1 branch avoids the cancellation in exp(z) - 1.
// Accurate to a few ulp for z in [-max, ~80]; inputs below the underflow
// limit are clamped.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>

namespace sitsmamba::detail {

#define SITSMAMBA_ALWAYS_INLINE inline __attribute__((always_inline))

template <typename T>
struct ExpTraits;

template <>
struct ExpTraits<float> {
  using Int = std::int32_t;
  static constexpr int kMantissa = 23;
  static constexpr int kBias = 127;
  static constexpr int kDegree = 8;
  static constexpr float kLow = -87.0f;
  static constexpr float kHigh = 88.0f;
  static constexpr float kShifter = 12582912.0f;  // 1.5 * 2^23
};

template <>
struct ExpTraits<double> {
  using Int = std::int64_t;
  static constexpr int kMantissa = 52;
  static constexpr int kBias = 1023;
  static constexpr int kDegree = 14;
  static constexpr double kLow = -708.0;
  static constexpr double kHigh = 709.0;
  static constexpr double kShifter = 6755399441055744.0;  // 1.5 * 2^52
};

// sum_{j=0}^{deg} r^j / (j + 1)!, so that expm1(r) = r * poly(r) and
// exp(r) = 1 + r * poly(r).
template <typename T>
SITSMAMBA_ALWAYS_INLINE T expm1_poly(T r) {
  constexpr int deg = ExpTraits<T>::kDegree;
  T p = T(1);
  for (int j = deg; j >= 1; --j) p = T(1) + r * p * (T(1) / T(j + 1));
  return p;
}

template <typename T>
SITSMAMBA_ALWAYS_INLINE T fast_exp(T z) {
  using Tr = ExpTraits<T>;
  constexpr T ln2_hi = T(0.693145751953125);
  constexpr T ln2_lo = T(1.42860682030941723212e-6);
  z = std::min(std::max(z, Tr::kLow), Tr::kHigh);
  // Round to nearest by adding and removing a large shifter.
  const T k = (z * T(1.44269504088896340736) + Tr::kShifter) - Tr::kShifter;
  const T r = (z - k * ln2_hi) - k * ln2_lo;
  const auto bits = static_cast<typename Tr::Int>(static_cast<typename Tr::Int>(k) + Tr::kBias) << Tr::kMantissa;
  return (T(1) + r * expm1_poly(r)) * std::bit_cast<T>(bits);
}

template <typename T>
SITSMAMBA_ALWAYS_INLINE T fast_expm1(T z) {
  constexpr T half_ln2 = T(0.34657359027997265471);
  const T small = z * expm1_poly(z);
  const T large = fast_exp(z) - T(1);
  return std::abs(z) < half_ln2 ? small : large;
}

}  // namespace sitsmamba::detail
