#include "sitsmamba/kernels.hpp"

#include <omp.h>

#include <Eigen/Core>
#include <algorithm>
#include <vector>

#include "sitsmamba/detail/fast_math.hpp"
#include "sitsmamba/zoh.hpp"

namespace sitsmamba::kernels {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

constexpr std::size_t kParallelFlops = std::size_t{1} << 18;

// Single-threaded C (+)= op(A) op(B) on raw buffers.
template <typename T>
void gemm_serial(const GemmDims& d, const T* a, const T* b, T* c, bool accumulate) {
  MutMap<T> cm(c, d.m, d.n);
  auto run = [&](const auto& am) {
    auto go = [&](const auto& bm) {
      if (accumulate) {
        cm.noalias() += am * bm;
      } else {
        cm.noalias() = am * bm;
      }
    };
    if (d.trans_b) {
      go(ConstMap<T>(b, d.n, d.k).transpose());
    } else {
      go(ConstMap<T>(b, d.k, d.n));
    }
  };
  if (d.trans_a) {
    run(ConstMap<T>(a, d.k, d.m).transpose());
  } else {
    run(ConstMap<T>(a, d.m, d.k));
  }
}

// Per-thread accumulation buffers, summed in thread order so the result is
// bit-reproducible for a given thread count.
template <typename T>
class ThreadPartials {
 public:
  ThreadPartials(int threads, std::size_t size)
      : size_(size), data_(static_cast<std::size_t>(threads) * size, T{0}) {}
  T* slot(int thread) { return data_.data() + static_cast<std::size_t>(thread) * size_; }
  void reduce_into(std::span<T> out) const {
    if (out.empty()) return;
    const std::size_t threads = size_ ? data_.size() / size_ : 0;
    for (std::size_t t = 0; t < threads; ++t) {
      const T* p = data_.data() + t * size_;
      for (std::size_t i = 0; i < size_; ++i) out[i] += p[i];
    }
  }

 private:
  std::size_t size_;
  std::vector<T> data_;
};

template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, T* col) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto hh = static_cast<std::ptrdiff_t>(h);
  const auto ww = static_cast<std::ptrdiff_t>(w);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    const T* plane = x + ch * h * w;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = col + ((ch * k + ki) * k + kj) * h * w;
        const auto di = static_cast<std::ptrdiff_t>(ki) - pad;
        const auto dj = static_cast<std::ptrdiff_t>(kj) - pad;
        for (std::ptrdiff_t i = 0; i < hh; ++i) {
          const auto si = i + di;
          T* out = row + i * ww;
          if (si < 0 || si >= hh) {
            std::fill(out, out + ww, T{0});
            continue;
          }
          const T* src = plane + si * ww;
          for (std::ptrdiff_t j = 0; j < ww; ++j) {
            const auto sj = j + dj;
            out[j] = (sj >= 0 && sj < ww) ? src[sj] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
                T* gx) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto hh = static_cast<std::ptrdiff_t>(h);
  const auto ww = static_cast<std::ptrdiff_t>(w);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    T* plane = gx + ch * h * w;
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = col + ((ch * k + ki) * k + kj) * h * w;
        const auto di = static_cast<std::ptrdiff_t>(ki) - pad;
        const auto dj = static_cast<std::ptrdiff_t>(kj) - pad;
        for (std::ptrdiff_t i = 0; i < hh; ++i) {
          const auto si = i + di;
          if (si < 0 || si >= hh) continue;
          T* dst = plane + si * ww;
          const T* in = row + i * ww;
          const std::ptrdiff_t j0 = std::max<std::ptrdiff_t>(0, -dj);
          const std::ptrdiff_t j1 = std::min<std::ptrdiff_t>(ww, ww - dj);
          for (std::ptrdiff_t j = j0; j < j1; ++j) dst[j + dj] += in[j];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm(const GemmDims& d, std::span<const T> a, std::span<const T> b, std::span<T> c,
          bool accumulate) {
  const int threads = omp_get_max_threads();
  if (threads == 1 || d.m * d.n * d.k < kParallelFlops || d.m < 2 * static_cast<std::size_t>(threads)) {
    gemm_serial(d, a.data(), b.data(), c.data(), accumulate);
    return;
  }
  // Row blocks of C; each block is an independent serial product.
  const std::size_t blocks = static_cast<std::size_t>(threads);
#pragma omp parallel for schedule(static)
  for (std::size_t blk = 0; blk < blocks; ++blk) {
    const std::size_t r0 = d.m * blk / blocks;
    const std::size_t r1 = d.m * (blk + 1) / blocks;
    if (r0 == r1) continue;
    GemmDims sub = d;
    sub.m = r1 - r0;
    T* cblk = c.data() + r0 * d.n;
    MutMap<T> cm(cblk, sub.m, d.n);
    auto go = [&](const auto& am) {
      if (d.trans_b) {
        if (accumulate) cm.noalias() += am * ConstMap<T>(b.data(), d.n, d.k).transpose();
        else cm.noalias() = am * ConstMap<T>(b.data(), d.n, d.k).transpose();
      } else {
        if (accumulate) cm.noalias() += am * ConstMap<T>(b.data(), d.k, d.n);
        else cm.noalias() = am * ConstMap<T>(b.data(), d.k, d.n);
      }
    };
    if (d.trans_a) {
      go(ConstMap<T>(a.data(), d.k, d.m).middleCols(r0, sub.m).transpose());
    } else {
      go(ConstMap<T>(a.data() + r0 * d.k, sub.m, d.k));
    }
  }
}

template <typename T>
void conv2d_forward(const Conv2dDims& d, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y) {
  const std::size_t hw = d.height * d.width;
  const std::size_t ckk = d.in_channels * d.kernel * d.kernel;
  const auto frames = static_cast<std::ptrdiff_t>(d.frames);
#pragma omp parallel
  {
    std::vector<T> col(ckk * hw);
#pragma omp for schedule(static)
    for (std::ptrdiff_t f = 0; f < frames; ++f) {
      im2col(x.data() + f * d.in_channels * hw, d.in_channels, d.height, d.width, d.kernel,
             col.data());
      T* out = y.data() + f * d.out_channels * hw;
      gemm_serial(GemmDims{d.out_channels, hw, ckk}, weight.data(), col.data(), out, false);
      if (!bias.empty()) {
        for (std::size_t o = 0; o < d.out_channels; ++o) {
          T* row = out + o * hw;
          const T bo = bias[o];
          for (std::size_t p = 0; p < hw; ++p) row[p] += bo;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const Conv2dDims& d, std::span<const T> x, std::span<const T> weight,
                     std::span<const T> gy, std::span<T> gx, std::span<T> gweight,
                     std::span<T> gbias) {
  const std::size_t hw = d.height * d.width;
  const std::size_t ckk = d.in_channels * d.kernel * d.kernel;
  const auto frames = static_cast<std::ptrdiff_t>(d.frames);
  const int threads = omp_get_max_threads();
  ThreadPartials<T> gw_parts(threads, gweight.empty() ? 0 : gweight.size());
  ThreadPartials<T> gb_parts(threads, gbias.empty() ? 0 : gbias.size());
#pragma omp parallel
  {
    const int tid = omp_get_thread_num();
    std::vector<T> col(ckk * hw);
    T* gw = gweight.empty() ? nullptr : gw_parts.slot(tid);
    T* gb = gbias.empty() ? nullptr : gb_parts.slot(tid);
#pragma omp for schedule(static)
    for (std::ptrdiff_t f = 0; f < frames; ++f) {
      const T* gyf = gy.data() + f * d.out_channels * hw;
      if (gw) {
        im2col(x.data() + f * d.in_channels * hw, d.in_channels, d.height, d.width, d.kernel,
               col.data());
        gemm_serial(GemmDims{d.out_channels, ckk, hw, false, true}, gyf, col.data(), gw, true);
      }
      if (gb) {
        for (std::size_t o = 0; o < d.out_channels; ++o) {
          const T* row = gyf + o * hw;
          T s{0};
          for (std::size_t p = 0; p < hw; ++p) s += row[p];
          gb[o] += s;
        }
      }
      if (!gx.empty()) {
        gemm_serial(GemmDims{ckk, hw, d.out_channels, true, false}, weight.data(), gyf, col.data(),
                    false);
        col2im_add(col.data(), d.in_channels, d.height, d.width, d.kernel,
                   gx.data() + f * d.in_channels * hw);
      }
    }
  }
  gw_parts.reduce_into(gweight);
  gb_parts.reduce_into(gbias);
}

template <typename T>
void depthwise_conv1d_forward(const Conv1dDims& d, std::span<const T> x, std::span<const T> weight,
                              std::span<const T> bias, std::span<T> y) {
  const auto batch = static_cast<std::ptrdiff_t>(d.batch);
  const auto kk = static_cast<std::ptrdiff_t>(d.kernel);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t b = 0; b < batch; ++b) {
    const T* xb = x.data() + b * d.length * d.channels;
    T* yb = y.data() + b * d.length * d.channels;
    for (std::ptrdiff_t t = 0; t < static_cast<std::ptrdiff_t>(d.length); ++t) {
      T* yt = yb + t * d.channels;
      for (std::size_t c = 0; c < d.channels; ++c) yt[c] = bias.empty() ? T{0} : bias[c];
      for (std::ptrdiff_t k = 0; k < kk; ++k) {
        const std::ptrdiff_t s = t - (kk - 1) + k;
        if (s < 0) continue;
        const T* xs = xb + s * d.channels;
        for (std::size_t c = 0; c < d.channels; ++c) yt[c] += weight[c * d.kernel + k] * xs[c];
      }
    }
  }
}

template <typename T>
void depthwise_conv1d_backward(const Conv1dDims& d, std::span<const T> x,
                               std::span<const T> weight, std::span<const T> gy, std::span<T> gx,
                               std::span<T> gweight, std::span<T> gbias) {
  const auto batch = static_cast<std::ptrdiff_t>(d.batch);
  const auto kk = static_cast<std::ptrdiff_t>(d.kernel);
  const int threads = omp_get_max_threads();
  ThreadPartials<T> gw_parts(threads, gweight.empty() ? 0 : gweight.size());
  ThreadPartials<T> gb_parts(threads, gbias.empty() ? 0 : gbias.size());
#pragma omp parallel
  {
    const int tid = omp_get_thread_num();
    T* gw = gweight.empty() ? nullptr : gw_parts.slot(tid);
    T* gb = gbias.empty() ? nullptr : gb_parts.slot(tid);
#pragma omp for schedule(static)
    for (std::ptrdiff_t b = 0; b < batch; ++b) {
      const T* xb = x.data() + b * d.length * d.channels;
      const T* gyb = gy.data() + b * d.length * d.channels;
      T* gxb = gx.empty() ? nullptr : gx.data() + b * d.length * d.channels;
      for (std::ptrdiff_t t = 0; t < static_cast<std::ptrdiff_t>(d.length); ++t) {
        const T* gyt = gyb + t * d.channels;
        if (gb) {
          for (std::size_t c = 0; c < d.channels; ++c) gb[c] += gyt[c];
        }
        for (std::ptrdiff_t k = 0; k < kk; ++k) {
          const std::ptrdiff_t s = t - (kk - 1) + k;
          if (s < 0) continue;
          const T* xs = xb + s * d.channels;
          if (gw) {
            for (std::size_t c = 0; c < d.channels; ++c) gw[c * d.kernel + k] += gyt[c] * xs[c];
          }
          if (gxb) {
            T* gxs = gxb + s * d.channels;
            for (std::size_t c = 0; c < d.channels; ++c) gxs[c] += weight[c * d.kernel + k] * gyt[c];
          }
        }
      }
    }
  }
  gw_parts.reduce_into(gweight);
  gb_parts.reduce_into(gbias);
}

// The scan kernels vectorize over the state axis. Each (step, channel)
// row needs exp(z) and phi(z) = expm1(z)/z for z = delta * a; both come
// from a single fast_expm1 evaluation.
template <typename T>
inline T row_phi(T z, T em) {
  return std::abs(z) < T(kZohSeriesThreshold) ? zoh_phi_series(z) : em / z;
}

template <typename T>
inline T row_dphi(T z, T em) {
  const T poly = T(0.5) + z * (T(1) / T(3) + z * (T(1) / T(8) + z * (T(1) / T(30))));
  return std::abs(z) < T(1e-2) ? poly : (z * (em + T(1)) - em) / (z * z);
}

template <typename T>
void selective_scan_forward(const ScanDims& d, const ScanInputs<T>& in, std::span<T> y) {
  const std::size_t n_state = d.state;
  const auto batch = static_cast<std::ptrdiff_t>(d.batch);
#pragma omp parallel
  {
    std::vector<T> h(d.channels * n_state);
#pragma omp for schedule(static)
    for (std::ptrdiff_t b = 0; b < batch; ++b) {
      std::fill(h.begin(), h.end(), T{0});
      for (std::size_t t = 0; t < d.length; ++t) {
        const std::size_t row = static_cast<std::size_t>(b) * d.length + t;
        const T* bt = in.b.data() + row * n_state;
        const T* ct = in.c.data() + row * n_state;
        for (std::size_t ch = 0; ch < d.channels; ++ch) {
          const T u = in.u[row * d.channels + ch];
          const T dt = in.delta[row * d.channels + ch];
          const T* a = in.a.data() + ch * n_state;
          T* hc = h.data() + ch * n_state;
          T acc{0};
#pragma omp simd reduction(+ : acc)
          for (std::size_t n = 0; n < n_state; ++n) {
            const T z = dt * a[n];
            const T em = detail::fast_expm1(z);
            const T hn = (em + T(1)) * hc[n] + row_phi(z, em) * dt * bt[n] * u;
            hc[n] = hn;
            acc += ct[n] * hn;
          }
          if (!in.d_skip.empty()) acc += in.d_skip[ch] * u;
          y[row * d.channels + ch] = acc;
        }
      }
    }
  }
}

template <typename T>
void selective_scan_backward(const ScanDims& d, const ScanInputs<T>& in, std::span<const T> gy,
                             const ScanGrads<T>& g) {
  const std::size_t n_state = d.state;
  const std::size_t dn = d.channels * n_state;
  const auto batch = static_cast<std::ptrdiff_t>(d.batch);
  const int threads = omp_get_max_threads();
  ThreadPartials<T> ga_parts(threads, g.a.empty() ? 0 : g.a.size());
  ThreadPartials<T> gd_parts(threads, g.d_skip.empty() ? 0 : g.d_skip.size());
#pragma omp parallel
  {
    const int tid = omp_get_thread_num();
    T* ga_acc = g.a.empty() ? nullptr : ga_parts.slot(tid);
    T* gd_acc = g.d_skip.empty() ? nullptr : gd_parts.slot(tid);
    // Per-sequence cache: states and the discretization factors.
    std::vector<T> hs(d.length * dn), abar_s(d.length * dn), phi_s(d.length * dn), dphi_s(d.length * dn);
    std::vector<T> gh(dn);
    std::vector<T> zeros(dn, T{0});
    // Targets for gradients nobody asked for, so the inner loop stays branch free.
    std::vector<T> sink_a(n_state), sink_b(n_state), sink_c(n_state);
#pragma omp for schedule(static)
    for (std::ptrdiff_t b = 0; b < batch; ++b) {
      const std::size_t base = static_cast<std::size_t>(b) * d.length;
      for (std::size_t t = 0; t < d.length; ++t) {
        const std::size_t row = base + t;
        const T* bt = in.b.data() + row * n_state;
        const T* hp = t ? hs.data() + (t - 1) * dn : zeros.data();
        for (std::size_t ch = 0; ch < d.channels; ++ch) {
          const T u = in.u[row * d.channels + ch];
          const T dt = in.delta[row * d.channels + ch];
          const T* a = in.a.data() + ch * n_state;
          const std::size_t off = t * dn + ch * n_state;
          T* ht = hs.data() + off;
          T* ab = abar_s.data() + off;
          T* ph = phi_s.data() + off;
          T* dp = dphi_s.data() + off;
          const T* hpc = hp + ch * n_state;
#pragma omp simd
          for (std::size_t n = 0; n < n_state; ++n) {
            const T z = dt * a[n];
            const T em = detail::fast_expm1(z);
            ab[n] = em + T(1);
            ph[n] = row_phi(z, em);
            dp[n] = row_dphi(z, em);
            ht[n] = ab[n] * hpc[n] + ph[n] * dt * bt[n] * u;
          }
        }
      }
      std::fill(gh.begin(), gh.end(), T{0});
      for (std::size_t t = d.length; t-- > 0;) {
        const std::size_t row = base + t;
        const T* bt = in.b.data() + row * n_state;
        const T* ct = in.c.data() + row * n_state;
        T* gbt = g.b.empty() ? nullptr : g.b.data() + row * n_state;
        T* gct = g.c.empty() ? nullptr : g.c.data() + row * n_state;
        const T* hp = t ? hs.data() + (t - 1) * dn : zeros.data();
        for (std::size_t ch = 0; ch < d.channels; ++ch) {
          const std::size_t idx = row * d.channels + ch;
          const T gyt = gy[idx];
          const T u = in.u[idx];
          const T dt = in.delta[idx];
          const T* a = in.a.data() + ch * n_state;
          const std::size_t off = t * dn + ch * n_state;
          const T* ht = hs.data() + off;
          const T* ab = abar_s.data() + off;
          const T* ph = phi_s.data() + off;
          const T* dp = dphi_s.data() + off;
          const T* hpc = hp + ch * n_state;
          T* ghc = gh.data() + ch * n_state;
          T gu{0};
          T gdelta{0};
          if (!in.d_skip.empty()) {
            gu += in.d_skip[ch] * gyt;
            if (gd_acc) gd_acc[ch] += gyt * u;
          }
          T* gac = ga_acc ? ga_acc + ch * n_state : sink_a.data();
          T* gbn = gbt ? gbt : sink_b.data();
          T* gcn = gct ? gct : sink_c.data();
          T su{0};
#pragma omp simd reduction(+ : su, gdelta)
          for (std::size_t n = 0; n < n_state; ++n) {
            const T z = dt * a[n];
            const T gtot = ghc[n] + gyt * ct[n];
            const T g_abar = gtot * hpc[n];
            const T g_bbar = gtot * u;
            su += gtot * ph[n] * dt * bt[n];
            gdelta += g_abar * a[n] * ab[n] + g_bbar * bt[n] * (ph[n] + z * dp[n]);
            gac[n] += g_abar * dt * ab[n] + g_bbar * dt * dt * dp[n] * bt[n];
            gbn[n] += g_bbar * dt * ph[n];
            gcn[n] += gyt * ht[n];
            ghc[n] = gtot * ab[n];
          }
          gu += su;
          if (!g.u.empty()) g.u[idx] += gu;
          if (!g.delta.empty()) g.delta[idx] += gdelta;
        }
      }
    }
  }
  ga_parts.reduce_into(g.a);
  gd_parts.reduce_into(g.d_skip);
}

#define SITSMAMBA_INSTANTIATE_KERNELS(T)                                                          \
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

SITSMAMBA_INSTANTIATE_KERNELS(float)
SITSMAMBA_INSTANTIATE_KERNELS(double)

}  // namespace sitsmamba::kernels
