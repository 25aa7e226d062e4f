#pragma once

// Compute kernels behind the differentiable ops. `kernels::` holds the
// OpenMP-parallel versions used in training; `reference::` holds plain serial
// loops with identical signatures, kept for tests and benchmarks.
//
// All buffers are dense row-major. Backward kernels accumulate (+=) into
// their gradient outputs; a null/empty gradient span means "not needed".

#include <cstddef>
#include <span>

namespace sitsmamba {

struct GemmDims {
  std::size_t m = 0;  // rows of op(A) and C
  std::size_t n = 0;  // cols of op(B) and C
  std::size_t k = 0;  // inner extent
  bool trans_a = false;
  bool trans_b = false;
};

struct Conv2dDims {
  std::size_t frames = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kernel = 3;  // odd; padding kernel/2 keeps H x W
};

struct Conv1dDims {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t channels = 0;
  std::size_t kernel = 4;
};

struct ScanDims {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::size_t channels = 0;  // d_inner
  std::size_t state = 0;     // N
};

/// Inputs of the fused selective scan. `a` is the materialized (negative)
/// diagonal state matrix, d_inner x N; `b` and `c` are per-(batch, t) rows
/// of length N shared across channels; `d_skip` may be empty.
template <typename T>
struct ScanInputs {
  std::span<const T> u;      // batch x length x channels
  std::span<const T> delta;  // batch x length x channels, > 0
  std::span<const T> a;      // channels x state
  std::span<const T> b;      // batch x length x state
  std::span<const T> c;      // batch x length x state
  std::span<const T> d_skip; // channels, or empty
};

template <typename T>
struct ScanGrads {
  std::span<T> u;
  std::span<T> delta;
  std::span<T> a;
  std::span<T> b;
  std::span<T> c;
  std::span<T> d_skip;
};

namespace kernels {

/// C = op(A) op(B) (+ C when accumulate).
template <typename T>
void gemm(const GemmDims& dims, std::span<const T> a, std::span<const T> b, std::span<T> c,
          bool accumulate);

template <typename T>
void conv2d_forward(const Conv2dDims& dims, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y);

template <typename T>
void conv2d_backward(const Conv2dDims& dims, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> gy, std::span<T> gx, std::span<T> gweight,
                     std::span<T> gbias);

/// Causal depthwise convolution along time: y[b,t,d] = bias[d] +
/// sum_k w[d,k] x[b, t-(K-1)+k, d], zero before t=0.
template <typename T>
void depthwise_conv1d_forward(const Conv1dDims& dims, std::span<const T> x,
                              std::span<const T> weight, std::span<const T> bias, std::span<T> y);

template <typename T>
void depthwise_conv1d_backward(const Conv1dDims& dims, std::span<const T> x,
                               std::span<const T> weight, std::span<const T> gy, std::span<T> gx,
                               std::span<T> gweight, std::span<T> gbias);

/// h_t = exp(delta_t a) h_{t-1} + phi(delta_t a) delta_t b_t u_t,
/// y_t = c_t . h_t + d_skip u_t, with h_{-1} = 0.
template <typename T>
void selective_scan_forward(const ScanDims& dims, const ScanInputs<T>& in, std::span<T> y);

/// Recomputes the states per sequence and runs the adjoint recurrence.
template <typename T>
void selective_scan_backward(const ScanDims& dims, const ScanInputs<T>& in, std::span<const T> gy,
                             const ScanGrads<T>& grads);

}  // namespace kernels

namespace reference {

template <typename T>
void gemm(const GemmDims& dims, std::span<const T> a, std::span<const T> b, std::span<T> c,
          bool accumulate);

template <typename T>
void conv2d_forward(const Conv2dDims& dims, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y);

template <typename T>
void conv2d_backward(const Conv2dDims& dims, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> gy, std::span<T> gx, std::span<T> gweight,
                     std::span<T> gbias);

template <typename T>
void depthwise_conv1d_forward(const Conv1dDims& dims, std::span<const T> x,
                              std::span<const T> weight, std::span<const T> bias, std::span<T> y);

template <typename T>
void depthwise_conv1d_backward(const Conv1dDims& dims, std::span<const T> x,
                               std::span<const T> weight, std::span<const T> gy, std::span<T> gx,
                               std::span<T> gweight, std::span<T> gbias);

template <typename T>
void selective_scan_forward(const ScanDims& dims, const ScanInputs<T>& in, std::span<T> y);

template <typename T>
void selective_scan_backward(const ScanDims& dims, const ScanInputs<T>& in, std::span<const T> gy,
                             const ScanGrads<T>& grads);

}  // namespace reference

}  // namespace sitsmamba
