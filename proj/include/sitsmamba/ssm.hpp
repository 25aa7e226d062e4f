#pragma once

// State-space machinery: per-step discretization, the discrete recurrence,
// its LTI convolution-kernel form, the input-selective scan and the gated
// Mamba block built on it.

#include <cstddef>

#include "sitsmamba/nn.hpp"
#include "sitsmamba/ops.hpp"
#include "sitsmamba/rng.hpp"
#include "sitsmamba/zoh.hpp"

namespace sitsmamba {

struct MambaConfig {
  std::size_t d_model = 128;
  std::size_t d_state = 16;
  std::size_t expand = 2;
  std::size_t d_conv = 4;
  std::size_t dt_rank = 0;  // 0 selects ceil(d_model / 16)
  double dt_min = 1e-3;
  double dt_max = 1e-1;
  double dt_init_floor = 1e-4;
  // Wrap the block as x + block(rms_norm(x)). Off: the bare block.
  bool residual_norm = false;

  std::size_t d_inner() const { return expand * d_model; }
  std::size_t resolved_dt_rank() const { return dt_rank ? dt_rank : (d_model + 15) / 16; }
};

/// Diagonal SSM parameters plus the projections that make delta, B and C
/// functions of the input. A = -exp(a_log) is strictly negative.
template <typename T>
struct SsmParams {
  std::size_t d_inner = 0;
  std::size_t d_state = 0;
  std::size_t dt_rank = 0;
  Tensor<T> a_log;   // [d_inner, d_state]
  Tensor<T> d_skip;  // [d_inner]
  Linear<T> to_dt;   // d_inner -> dt_rank, no bias
  Linear<T> to_b;    // d_inner -> d_state, no bias
  Linear<T> to_c;    // d_inner -> d_state, no bias
  Linear<T> dt_proj; // dt_rank -> d_inner, bias sets the initial step size

  /// S4D-real A (row entries -(n+1)), D = 1, softplus(dt bias) log-uniform
  /// in [dt_min, dt_max].
  static SsmParams init(const MambaConfig& config, Rng& rng);

  /// Materialized A = -exp(a_log), detached.
  Tensor<T> a() const;
  void collect(const std::string& prefix, ParamList<T>& out);
};

template <typename T>
struct Selectivity {
  Tensor<T> delta;  // [B, L, d_inner], softplus output, > 0
  Tensor<T> b;      // [B, L, d_state]
  Tensor<T> c;      // [B, L, d_state]
};

template <typename T>
Selectivity<T> project_selectivity(const SsmParams<T>& params, const Tensor<T>& u);

/// u [B, L, d_inner] -> [B, L, d_inner] through the fused scan kernel.
template <typename T>
Tensor<T> selective_scan(const SsmParams<T>& params, const Tensor<T>& u);

/// Same map assembled from zoh_discretize and scan_recurrence primitives.
/// Slower and memory hungry; kept as an independent route for checks.
template <typename T>
Tensor<T> selective_scan_composite(const SsmParams<T>& params, const Tensor<T>& u);

/// One unbatched discretized system over L steps with D channels.
template <typename T>
struct DiscreteStep {
  Tensor<T> a_bar;  // [L, D, N]
  Tensor<T> b_bar;  // [L, D, N]
  Tensor<T> c;      // [L, N]

  std::size_t length() const { return a_bar.shape()[0]; }
};

/// Broadcasts constant (a_bar, b_bar [D, N], c [N]) over L steps.
template <typename T>
DiscreteStep<T> constant_step(const Tensor<T>& a_bar, const Tensor<T>& b_bar, const Tensor<T>& c,
                              std::size_t length);

/// h_t = a_bar_t h_{t-1} + b_bar_t x_t, y_t = c_t h_t (+ d_skip x_t).
/// x [L, D]; h0 [D, N] or undefined for zeros; d_skip [D] or undefined.
template <typename T>
Tensor<T> scan_recurrence(const DiscreteStep<T>& steps, const Tensor<T>& x, const Tensor<T>& h0 = {},
                          const Tensor<T>& d_skip = {});

/// K[k, d] = sum_n c_n a_bar_{d,n}^k b_bar_{d,n} for k < L. Requires
/// time-invariant steps.
template <typename T>
Tensor<T> ssm_kernel(const DiscreteStep<T>& steps);

/// Causal convolution of x [L, D] with ssm_kernel(steps), zero left padding.
/// Not differentiable; verification route only.
template <typename T>
Tensor<T> kernel_convolve(const DiscreteStep<T>& steps, const Tensor<T>& x);

/// Gated block: main branch in_x -> causal depthwise conv -> SiLU ->
/// selective scan; gate branch in_z -> SiLU; product -> out projection.
template <typename T>
struct MambaBlock {
  MambaConfig config;
  Linear<T> in_x;  // d_model -> d_inner, no bias
  Linear<T> in_z;  // d_model -> d_inner, no bias
  Tensor<T> conv_weight;  // [d_inner, d_conv]
  Tensor<T> conv_bias;    // [d_inner]
  SsmParams<T> ssm;
  Linear<T> out;  // d_inner -> d_model, with bias
  Tensor<T> norm_weight;  // [d_model], only with residual_norm

  static MambaBlock init(const MambaConfig& config, Rng& rng);

  /// x [B, L, d_model] -> [B, L, d_model].
  Tensor<T> operator()(const Tensor<T>& x) const;
  void collect(const std::string& prefix, ParamList<T>& out);
};

}  // namespace sitsmamba
