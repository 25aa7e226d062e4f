#pragma once

// Differentiable primitives. Every op validates shapes, rejects non-finite
// results, and records its backward closure on the thread's tape when any
// input requires a gradient and recording is enabled.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "sitsmamba/tensor.hpp"

namespace sitsmamba {

// Elementwise with numpy-style broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);

template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> softplus(const Tensor<T>& x);
template <typename T> Tensor<T> silu(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);

/// [..., K] x [K, N] -> [..., N].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// x [..., in] w [in, out] (+ bias [out], may be undefined) -> [..., out].
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// x [F, C, H, W], w [O, C, k, k] with odd k, bias [O] or undefined.
/// Cross-correlation, zero padding k/2, stride 1.
template <typename T> Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);
/// x [B, L, D], w [D, k], bias [D] or undefined. Causal along L.
template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

/// Maximum along `axis`, which is removed from the shape. Ties go to the
/// lowest index.
template <typename T> Tensor<T> max_over_axis(const Tensor<T>& x, std::size_t axis);
/// As above, considering only positions where `valid[outer * len + i]` is
/// nonzero; `outer` is the product of the extents before `axis`.
template <typename T>
Tensor<T> masked_max_over_axis(const Tensor<T>& x, std::size_t axis, std::span<const std::uint8_t> valid);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);
template <typename T> Tensor<T> transpose(const Tensor<T>& x, std::size_t axis0, std::size_t axis1);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

/// x / sqrt(mean(x^2 over the last axis) + eps) * weight, weight [last extent].
template <typename T> Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& weight, T eps = T(1e-5));

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis);

/// Batch normalization over channel axis 1 of x [N, C, ...]. In training
/// mode statistics come from the batch (biased variance) and the running
/// estimates are updated in place with `momentum` (unbiased variance);
/// otherwise the running estimates are used.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                    T momentum = T(0.1), T eps = T(1e-5));

/// Per-timestep zero-order hold of a diagonal system: a [D, N],
/// b [B, L, N], delta [B, L, D] (> 0) -> (a_bar, b_bar), each [B, L, D, N].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> zoh_discretize(const Tensor<T>& a, const Tensor<T>& b,
                                               const Tensor<T>& delta);

/// h_t = a_bar_t * h_{t-1} + b_bar_t x_t, y_t[d] = sum_n c_t[n] h_t[d, n].
/// a_bar, b_bar [B, L, D, N]; c [B, L, N]; x [B, L, D]; h0 [B, D, N] or
/// undefined for zeros. Returns y [B, L, D].
template <typename T>
Tensor<T> scan_recurrence(const Tensor<T>& a_bar, const Tensor<T>& b_bar, const Tensor<T>& c,
                          const Tensor<T>& x, const Tensor<T>& h0 = {});

/// Fused input-selective scan with A = -exp(a_log): u, delta [B, L, D];
/// a_log [D, N]; b, c [B, L, N]; d_skip [D] or undefined.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& a_log,
                         const Tensor<T>& b, const Tensor<T>& c, const Tensor<T>& d_skip);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

}  // namespace sitsmamba
