// Serial, direct-loop versions of every kernel. Slow on purpose: no im2col,
// no BLAS, no fused recompute. They define what the parallel kernels must
// reproduce.

#include <cmath>
#include <vector>

#include "sitsmamba/kernels.hpp"
#include "sitsmamba/zoh.hpp"

namespace sitsmamba::reference {

template <typename T>
void gemm(const GemmDims& d, std::span<const T> a, std::span<const T> b, std::span<T> c,
          bool accumulate) {
  for (std::size_t i = 0; i < d.m; ++i) {
    for (std::size_t j = 0; j < d.n; ++j) {
      T s{0};
      for (std::size_t p = 0; p < d.k; ++p) {
        const T av = d.trans_a ? a[p * d.m + i] : a[i * d.k + p];
        const T bv = d.trans_b ? b[j * d.k + p] : b[p * d.n + j];
        s += av * bv;
      }
      c[i * d.n + j] = accumulate ? c[i * d.n + j] + s : s;
    }
  }
}

template <typename T>
void conv2d_forward(const Conv2dDims& d, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y) {
  const auto pad = static_cast<std::ptrdiff_t>(d.kernel / 2);
  const auto h = static_cast<std::ptrdiff_t>(d.height);
  const auto w = static_cast<std::ptrdiff_t>(d.width);
  for (std::size_t f = 0; f < d.frames; ++f) {
    for (std::size_t o = 0; o < d.out_channels; ++o) {
      for (std::ptrdiff_t i = 0; i < h; ++i) {
        for (std::ptrdiff_t j = 0; j < w; ++j) {
          T s = bias.empty() ? T{0} : bias[o];
          for (std::size_t c = 0; c < d.in_channels; ++c) {
            for (std::size_t ki = 0; ki < d.kernel; ++ki) {
              for (std::size_t kj = 0; kj < d.kernel; ++kj) {
                const auto si = i + static_cast<std::ptrdiff_t>(ki) - pad;
                const auto sj = j + static_cast<std::ptrdiff_t>(kj) - pad;
                if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
                s += weight[((o * d.in_channels + c) * d.kernel + ki) * d.kernel + kj] *
                     x[((f * d.in_channels + c) * d.height + si) * d.width + sj];
              }
            }
          }
          y[((f * d.out_channels + o) * d.height + i) * d.width + j] = s;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const Conv2dDims& d, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> gy, std::span<T> gx, std::span<T> gweight,
                     std::span<T> gbias) {
  const auto pad = static_cast<std::ptrdiff_t>(d.kernel / 2);
  const auto h = static_cast<std::ptrdiff_t>(d.height);
  const auto w = static_cast<std::ptrdiff_t>(d.width);
  for (std::size_t f = 0; f < d.frames; ++f) {
    for (std::size_t o = 0; o < d.out_channels; ++o) {
      for (std::ptrdiff_t i = 0; i < h; ++i) {
        for (std::ptrdiff_t j = 0; j < w; ++j) {
          const T g = gy[((f * d.out_channels + o) * d.height + i) * d.width + j];
          if (!gbias.empty()) gbias[o] += g;
          for (std::size_t c = 0; c < d.in_channels; ++c) {
            for (std::size_t ki = 0; ki < d.kernel; ++ki) {
              for (std::size_t kj = 0; kj < d.kernel; ++kj) {
                const auto si = i + static_cast<std::ptrdiff_t>(ki) - pad;
                const auto sj = j + static_cast<std::ptrdiff_t>(kj) - pad;
                if (si < 0 || si >= h || sj < 0 || sj >= w) continue;
                const std::size_t wi = ((o * d.in_channels + c) * d.kernel + ki) * d.kernel + kj;
                const std::size_t xi = ((f * d.in_channels + c) * d.height + si) * d.width + sj;
                if (!gweight.empty()) gweight[wi] += g * x[xi];
                if (!gx.empty()) gx[xi] += g * weight[wi];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void depthwise_conv1d_forward(const Conv1dDims& d, std::span<const T> x, std::span<const T> weight,
                              std::span<const T> bias, std::span<T> y) {
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t c = 0; c < d.channels; ++c) {
      for (std::size_t t = 0; t < d.length; ++t) {
        T s = bias.empty() ? T{0} : bias[c];
        for (std::size_t k = 0; k < d.kernel; ++k) {
          const auto src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(d.kernel - 1);
          if (src < 0) continue;
          s += weight[c * d.kernel + k] * x[(b * d.length + static_cast<std::size_t>(src)) * d.channels + c];
        }
        y[(b * d.length + t) * d.channels + c] = s;
      }
    }
  }
}

template <typename T>
void depthwise_conv1d_backward(const Conv1dDims& d, std::span<const T> x,
                               std::span<const T> weight, std::span<const T> gy, std::span<T> gx,
                               std::span<T> gweight, std::span<T> gbias) {
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t c = 0; c < d.channels; ++c) {
      for (std::size_t t = 0; t < d.length; ++t) {
        const T g = gy[(b * d.length + t) * d.channels + c];
        if (!gbias.empty()) gbias[c] += g;
        for (std::size_t k = 0; k < d.kernel; ++k) {
          const auto src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(d.kernel - 1);
          if (src < 0) continue;
          const std::size_t xi = (b * d.length + static_cast<std::size_t>(src)) * d.channels + c;
          if (!gweight.empty()) gweight[c * d.kernel + k] += g * x[xi];
          if (!gx.empty()) gx[xi] += g * weight[c * d.kernel + k];
        }
      }
    }
  }
}

// Materializes the discretized system for one (batch, channel) sequence.
template <typename T>
struct Chain {
  std::vector<T> abar, bbar, h;  // length x state each
};

template <typename T>
Chain<T> build_chain(const ScanDims& d, const ScanInputs<T>& in, std::size_t b, std::size_t c) {
  Chain<T> ch;
  const std::size_t n_state = d.state;
  ch.abar.resize(d.length * n_state);
  ch.bbar.resize(d.length * n_state);
  ch.h.resize(d.length * n_state);
  for (std::size_t t = 0; t < d.length; ++t) {
    const std::size_t row = b * d.length + t;
    const T dt = in.delta[row * d.channels + c];
    const T u = in.u[row * d.channels + c];
    for (std::size_t n = 0; n < n_state; ++n) {
      const auto zp = discretize_zoh(in.a[c * n_state + n], in.b[row * n_state + n], dt);
      ch.abar[t * n_state + n] = zp.a_bar;
      ch.bbar[t * n_state + n] = zp.b_bar;
      const T prev = t ? ch.h[(t - 1) * n_state + n] : T{0};
      ch.h[t * n_state + n] = zp.a_bar * prev + zp.b_bar * u;
    }
  }
  return ch;
}

template <typename T>
void selective_scan_forward(const ScanDims& d, const ScanInputs<T>& in, std::span<T> y) {
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t c = 0; c < d.channels; ++c) {
      const auto ch = build_chain(d, in, b, c);
      for (std::size_t t = 0; t < d.length; ++t) {
        const std::size_t row = b * d.length + t;
        T s{0};
        for (std::size_t n = 0; n < d.state; ++n) s += in.c[row * d.state + n] * ch.h[t * d.state + n];
        if (!in.d_skip.empty()) s += in.d_skip[c] * in.u[row * d.channels + c];
        y[row * d.channels + c] = s;
      }
    }
  }
}

template <typename T>
void selective_scan_backward(const ScanDims& d, const ScanInputs<T>& in, std::span<const T> gy,
                             const ScanGrads<T>& g) {
  const std::size_t ns = d.state;
  for (std::size_t b = 0; b < d.batch; ++b) {
    for (std::size_t c = 0; c < d.channels; ++c) {
      const auto ch = build_chain(d, in, b, c);
      // Adjoint of h_t, built back to front.
      std::vector<T> lam(d.length * ns, T{0});
      for (std::size_t t = d.length; t-- > 0;) {
        const std::size_t row = b * d.length + t;
        const T gyt = gy[row * d.channels + c];
        for (std::size_t n = 0; n < ns; ++n) {
          T v = gyt * in.c[row * ns + n];
          if (t + 1 < d.length) v += lam[(t + 1) * ns + n] * ch.abar[(t + 1) * ns + n];
          lam[t * ns + n] = v;
        }
      }
      for (std::size_t t = 0; t < d.length; ++t) {
        const std::size_t row = b * d.length + t;
        const std::size_t idx = row * d.channels + c;
        const T gyt = gy[idx];
        const T u = in.u[idx];
        const T dt = in.delta[idx];
        if (!in.d_skip.empty()) {
          if (!g.u.empty()) g.u[idx] += in.d_skip[c] * gyt;
          if (!g.d_skip.empty()) g.d_skip[c] += gyt * u;
        }
        for (std::size_t n = 0; n < ns; ++n) {
          const T a = in.a[c * ns + n];
          const T bn = in.b[row * ns + n];
          const T z = dt * a;
          const T l = lam[t * ns + n];
          const T prev = t ? ch.h[(t - 1) * ns + n] : T{0};
          const T abar = ch.abar[t * ns + n];
          // d abar / d delta = a abar,  d abar / d a = delta abar
          // d bbar / d delta = b (phi + z phi'),  d bbar / d a = delta^2 b phi'
          const T dphi = zoh_phi_derivative(z);
          const T phi = zoh_phi(z);
          if (!g.c.empty()) g.c[row * ns + n] += gyt * ch.h[t * ns + n];
          if (!g.u.empty()) g.u[idx] += l * ch.bbar[t * ns + n];
          if (!g.delta.empty()) g.delta[idx] += l * (prev * a * abar + u * bn * (phi + z * dphi));
          if (!g.a.empty()) g.a[c * ns + n] += l * (prev * dt * abar + u * dt * dt * dphi * bn);
          if (!g.b.empty()) g.b[row * ns + n] += l * u * dt * phi;
        }
      }
    }
  }
}

#define SITSMAMBA_INSTANTIATE_REFERENCE(T)                                                        \
  template void gemm<T>(const GemmDims&, std::span<const T>, std::span<const T>, std::span<T>,    \
                        bool);                                                                    \
  template void conv2d_forward<T>(const Conv2dDims&, std::span<const T>, std::span<const T>,      \
                                  std::span<const T>, std::span<T>);                              \
  template void conv2d_backward<T>(const Conv2dDims&, std::span<const T>, std::span<const T>,     \
                                   std::span<const T>, std::span<T>, std::span<T>, std::span<T>); \
  template void depthwise_conv1d_forward<T>(const Conv1dDims&, std::span<const T>,                \
                                            std::span<const T>, std::span<const T>, std::span<T>);\
  template void depthwise_conv1d_backward<T>(const Conv1dDims&, std::span<const T>,               \
                                             std::span<const T>, std::span<const T>,              \
                                             std::span<T>, std::span<T>, std::span<T>);           \
  template void selective_scan_forward<T>(const ScanDims&, const ScanInputs<T>&, std::span<T>);   \
  template void selective_scan_backward<T>(const ScanDims&, const ScanInputs<T>&,                 \
                                           std::span<const T>, const ScanGrads<T>&);

SITSMAMBA_INSTANTIATE_REFERENCE(float)
SITSMAMBA_INSTANTIATE_REFERENCE(double)

}  // namespace sitsmamba::reference
