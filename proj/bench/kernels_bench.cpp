// OpenMP kernels vs the serial reference loops, at the shapes one training
// batch of the 16x16 synthetic task produces. Run with --benchmark_filter.

#include <benchmark/benchmark.h>

#include <vector>

#include "sitsmamba/kernels.hpp"
#include "sitsmamba/model.hpp"
#include "sitsmamba/ops.hpp"
#include "sitsmamba/rng.hpp"

using namespace sitsmamba;

namespace {

std::vector<float> filled(std::size_t n, Rng& rng, double lo = -1, double hi = 1) {
  std::vector<float> v(n);
  for (auto& x : v) x = float(rng.uniform(lo, hi));
  return v;
}

struct Par {};
struct Ref {};

template <typename Impl, typename... A>
void gemm(A&&... a) {
  if constexpr (std::is_same_v<Impl, Par>) kernels::gemm<float>(a...);
  else reference::gemm<float>(a...);
}

template <typename Impl>
void BM_gemm(benchmark::State& st) {
  Rng rng(1);
  const GemmDims d{5120, 256, 128, false, true};  // pixels*T x d_inner, in_x projection
  auto a = filled(d.m * d.k, rng), b = filled(d.n * d.k, rng);
  std::vector<float> c(d.m * d.n);
  for (auto _ : st) {
    gemm<Impl>(d, std::span<const float>(a), std::span<const float>(b), std::span<float>(c), false);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * 2 * d.m * d.n * d.k);
}

template <typename Impl>
void BM_conv2d_forward(benchmark::State& st) {
  Rng rng(2);
  const Conv2dDims d{40, 128, 128, 16, 16, 3};  // 2 samples x T=20 frames
  auto x = filled(d.frames * d.in_channels * 256, rng), w = filled(128 * 128 * 9, rng), bias = filled(128, rng);
  std::vector<float> y(d.frames * d.out_channels * 256);
  for (auto _ : st) {
    if constexpr (std::is_same_v<Impl, Par>)
      kernels::conv2d_forward<float>(d, x, w, bias, y);
    else
      reference::conv2d_forward<float>(d, x, w, bias, y);
    benchmark::DoNotOptimize(y.data());
  }
}

template <typename Impl>
void BM_conv2d_backward(benchmark::State& st) {
  Rng rng(3);
  const Conv2dDims d{40, 128, 128, 16, 16, 3};
  auto x = filled(d.frames * d.in_channels * 256, rng), w = filled(128 * 128 * 9, rng);
  auto gy = filled(d.frames * d.out_channels * 256, rng);
  std::vector<float> gx(x.size()), gw(w.size()), gb(128);
  for (auto _ : st) {
    if constexpr (std::is_same_v<Impl, Par>)
      kernels::conv2d_backward<float>(d, x, w, gy, gx, gw, gb);
    else
      reference::conv2d_backward<float>(d, x, w, gy, gx, gw, gb);
    benchmark::DoNotOptimize(gw.data());
  }
}

template <typename Impl>
void BM_depthwise_conv1d(benchmark::State& st) {
  Rng rng(4);
  const Conv1dDims d{512, 20, 256, 4};
  auto x = filled(d.batch * d.length * d.channels, rng), w = filled(256 * 4, rng), bias = filled(256, rng);
  std::vector<float> y(x.size());
  for (auto _ : st) {
    if constexpr (std::is_same_v<Impl, Par>)
      kernels::depthwise_conv1d_forward<float>(d, x, w, bias, y);
    else
      reference::depthwise_conv1d_forward<float>(d, x, w, bias, y);
    benchmark::DoNotOptimize(y.data());
  }
}

struct ScanData {
  ScanDims d{512, 20, 256, 16};
  std::vector<float> u, delta, a, b, c, dskip, y, gy;
  std::vector<float> gu, gdelta, ga, gb, gc, gd;
  ScanData() {
    Rng rng(5);
    const std::size_t blc = d.batch * d.length * d.channels, bln = d.batch * d.length * d.state;
    u = filled(blc, rng);
    delta = filled(blc, rng, 1e-3, 0.1);
    a = filled(d.channels * d.state, rng, -16, -1);
    b = filled(bln, rng);
    c = filled(bln, rng);
    dskip = filled(d.channels, rng);
    y.resize(blc);
    gy = filled(blc, rng);
    gu.resize(blc), gdelta.resize(blc), ga.resize(a.size()), gb.resize(bln), gc.resize(bln), gd.resize(d.channels);
  }
  ScanInputs<float> in() const { return {u, delta, a, b, c, dskip}; }
  ScanGrads<float> grads() { return {gu, gdelta, ga, gb, gc, gd}; }
};

template <typename Impl>
void BM_scan_forward(benchmark::State& st) {
  ScanData s;
  for (auto _ : st) {
    if constexpr (std::is_same_v<Impl, Par>)
      kernels::selective_scan_forward<float>(s.d, s.in(), s.y);
    else
      reference::selective_scan_forward<float>(s.d, s.in(), s.y);
    benchmark::DoNotOptimize(s.y.data());
  }
}

template <typename Impl>
void BM_scan_backward(benchmark::State& st) {
  ScanData s;
  for (auto _ : st) {
    if constexpr (std::is_same_v<Impl, Par>)
      kernels::selective_scan_backward<float>(s.d, s.in(), s.gy, s.grads());
    else
      reference::selective_scan_backward<float>(s.d, s.in(), s.gy, s.grads());
    benchmark::DoNotOptimize(s.gu.data());
  }
}

// whole forward + backward of one batch of 2 patches, default model
void BM_train_step(benchmark::State& st) {
  ModelConfig mc;
  mc.input_channels = 4;
  mc.num_classes = 6;
  mc.validate();
  auto model = SitsMamba<float>::init(mc, 1);
  Rng rng(6);
  const auto x = Tensor<float>({2, 20, 4, 16, 16}, filled(2 * 20 * 4 * 256, rng, 0, 1));
  std::vector<std::uint16_t> labels(2 * 256);
  for (auto& l : labels) l = std::uint16_t(rng.uniform_int(0, 5));
  for (auto _ : st) {
    auto out = model.forward(x, {20, 20}, true, true);
    const auto total = combined_loss(classification_loss(out.class_logits, labels, {}),
                                     reconstruction_loss(x, out.reconstruction, {20, 20}, true), mc.loss);
    backward(total);
    for (auto& p : model.parameters()) p.tensor->zero_grad();
  }
}

}  // namespace

BENCHMARK(BM_gemm<Par>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_gemm<Ref>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv2d_forward<Par>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv2d_forward<Ref>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv2d_backward<Par>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv2d_backward<Ref>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_depthwise_conv1d<Par>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_depthwise_conv1d<Ref>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_scan_forward<Par>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_scan_forward<Ref>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_scan_backward<Par>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_scan_backward<Ref>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_train_step)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
