#include "sitsmamba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "sitsmamba/detail/fast_math.hpp"
#include "sitsmamba/kernels.hpp"
#include "sitsmamba/zoh.hpp"

namespace sitsmamba {
namespace {

template <typename T>
using NodePtr = std::shared_ptr<detail::TensorNode<T>>;

constexpr std::size_t kParallelElems = std::size_t{1} << 15;

template <typename T>
bool tracks(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::local().recording()) return false;
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  bool ok = true;
  const auto n = static_cast<std::ptrdiff_t>(v.size());
#pragma omp parallel for reduction(&& : ok) if (v.size() > kParallelElems)
  for (std::ptrdiff_t i = 0; i < n; ++i) ok = ok && std::isfinite(v[i]);
  if (!ok) throw NumericError(std::string(op) + ": non-finite value in output");
}

// Wraps op output into a tensor, marking it as tape-produced when tracked.
template <typename T>
Tensor<T> make_output(const char* op, Shape shape, std::vector<T> values, bool track) {
  check_finite(values, op);
  Tensor<T> out(std::move(shape), std::move(values));
  if (track) {
    out.node()->requires_grad = true;
    out.node()->generation = Tape<T>::local().generation();
  }
  return out;
}

template <typename T>
void record(std::function<void()> fn) {
  Tape<T>::local().record(std::move(fn));
}

// Gradient buffer of an input that wants one, else nullptr.
template <typename T>
T* grad_of(const NodePtr<T>& n) {
  if (!n || !n->requires_grad) return nullptr;
  n->ensure_grad();
  return n->grad.data();
}

// ---------------------------------------------------------------- broadcast

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(rank, 1);
  bc.stride_a.assign(rank, 0);
  bc.stride_b.assign(rank, 0);
  const auto sa = contiguous_strides(a);
  const auto sb = contiguous_strides(b);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::ptrdiff_t ia = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(rank - a.size());
    const std::ptrdiff_t ib = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(rank - b.size());
    const std::size_t ea = ia >= 0 ? a[static_cast<std::size_t>(ia)] : 1;
    const std::size_t eb = ib >= 0 ? b[static_cast<std::size_t>(ib)] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    bc.out[i] = std::max(ea, eb);
    if (ia >= 0 && ea != 1) bc.stride_a[i] = sa[static_cast<std::size_t>(ia)];
    if (ib >= 0 && eb != 1) bc.stride_b[i] = sb[static_cast<std::size_t>(ib)];
  }
  return bc;
}

// Calls f(out_index, a_offset, b_offset) over the broadcast output in order.
template <typename F>
void broadcast_loop(const Broadcast& bc, F&& f) {
  const std::size_t rank = bc.out.size();
  const std::size_t total = numel_of(bc.out);
  if (total == 0) return;
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = bc.out.back();
  const std::size_t sa_in = bc.stride_a.back();
  const std::size_t sb_in = bc.stride_b.back();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, oa + j * sa_in, ob + j * sb_in);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      oa += bc.stride_a[d];
      ob += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      oa -= bc.stride_a[d] * bc.out[d];
      ob -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

enum class Binary { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Binary kind, const char* name) {
  const bool track = tracks({&a, &b});
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  const bool same = a.shape() == b.shape();
  Broadcast bc;
  if (same) {
    bc.out = a.shape();
  } else {
    bc = broadcast_shapes(a.shape(), b.shape(), name);
  }
  std::vector<T> out(numel_of(bc.out));
  auto apply = [kind](T x, T y) {
    switch (kind) {
      case Binary::kAdd: return x + y;
      case Binary::kSub: return x - y;
      default: return x * y;
    }
  };
  if (same) {
    const auto n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for if (out.size() > kParallelElems)
    for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = apply(av[i], bv[i]);
  } else {
    broadcast_loop(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = apply(av[ia], bv[ib]); });
  }
  auto result = make_output(name, bc.out, std::move(out), track);
  if (track) {
    record<T>([an = a.node(), bn = b.node(), on = result.node(), bc, same, kind] {
      if (on->grad.empty()) return;
      const auto& gy = on->grad;
      T* ga = grad_of(an);
      T* gb = grad_of(bn);
      const auto& av = an->value;
      const auto& bv = bn->value;
      auto contrib = [&](std::size_t o, std::size_t ia, std::size_t ib) {
        const T g = gy[o];
        switch (kind) {
          case Binary::kAdd:
            if (ga) ga[ia] += g;
            if (gb) gb[ib] += g;
            break;
          case Binary::kSub:
            if (ga) ga[ia] += g;
            if (gb) gb[ib] -= g;
            break;
          case Binary::kMul:
            if (ga) ga[ia] += g * bv[ib];
            if (gb) gb[ib] += g * av[ia];
            break;
        }
      };
      if (same) {
        for (std::size_t i = 0; i < gy.size(); ++i) contrib(i, i, i);
      } else {
        broadcast_loop(bc, contrib);
      }
    });
  }
  return result;
}

// Unary op given value map f(x) and derivative df(x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, const char* name, F f, DF df) {
  const bool track = tracks({&x});
  const auto& xv = x.node()->value;
  std::vector<T> out(xv.size());
  const auto n = static_cast<std::ptrdiff_t>(out.size());
#pragma omp parallel for simd if (out.size() > kParallelElems)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = f(xv[i]);
  auto result = make_output(name, x.shape(), std::move(out), track);
  if (track) {
    record<T>([xn = x.node(), on = result.node(), df] {
      if (on->grad.empty()) return;
      T* gx = grad_of(xn);
      if (!gx) return;
      const auto n = static_cast<std::ptrdiff_t>(on->grad.size());
#pragma omp parallel for simd if (on->grad.size() > kParallelElems)
      for (std::ptrdiff_t i = 0; i < n; ++i) gx[i] += on->grad[i] * df(xn->value[i], on->value[i]);
    });
  }
  return result;
}

template <typename T>
T sigmoid_scalar(T x) {
  return T(1) / (T(1) + detail::fast_exp(-x));
}

template <typename T>
T softplus_scalar(T x) {
  if (x > T(20)) return x;
  return std::log1p(std::exp(x));
}

// outer x len x inner decomposition around an axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + to_string(s));
  }
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

template <typename T>
Tensor<T> max_impl(const Tensor<T>& x, std::size_t axis, std::span<const std::uint8_t> valid, const char* name) {
  const auto sp = split_axis(x.shape(), axis, name);
  if (sp.len == 0) throw ShapeError(std::string(name) + ": empty axis");
  if (!valid.empty() && valid.size() != sp.outer * sp.len) {
    throw ShapeError(std::string(name) + ": mask size " + std::to_string(valid.size()) + " != " +
                     std::to_string(sp.outer * sp.len));
  }
  const bool track = tracks({&x});
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(sp.outer * sp.inner);
  std::vector<std::size_t> arg(out.size());
  const auto& xv = x.node()->value;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::size_t first = 0;
    if (!valid.empty()) {
      while (first < sp.len && !valid[o * sp.len + first]) ++first;
      if (first == sp.len) throw ShapeError(std::string(name) + ": no valid position along axis");
    }
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = first;
      T bv = xv[(o * sp.len + first) * sp.inner + i];
      for (std::size_t l = first + 1; l < sp.len; ++l) {
        if (!valid.empty() && !valid[o * sp.len + l]) continue;
        const T v = xv[(o * sp.len + l) * sp.inner + i];
        if (v > bv) {
          bv = v;
          best = l;
        }
      }
      out[o * sp.inner + i] = bv;
      arg[o * sp.inner + i] = (o * sp.len + best) * sp.inner + i;
    }
  }
  auto result = make_output(name, std::move(out_shape), std::move(out), track);
  if (track) {
    record<T>([xn = x.node(), on = result.node(), arg = std::move(arg)] {
      if (on->grad.empty()) return;
      T* gx = grad_of(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += on->grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> softmax_impl(const Tensor<T>& x, std::size_t axis, bool log_space) {
  const char* name = log_space ? "log_softmax" : "softmax";
  const auto sp = split_axis(x.shape(), axis, name);
  const bool track = tracks({&x});
  const auto& xv = x.node()->value;
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      T m = xv[base];
      for (std::size_t l = 1; l < sp.len; ++l) m = std::max(m, xv[base + l * sp.inner]);
      T s{0};
      for (std::size_t l = 0; l < sp.len; ++l) s += std::exp(xv[base + l * sp.inner] - m);
      const T lse = m + std::log(s);
      for (std::size_t l = 0; l < sp.len; ++l) {
        const T v = xv[base + l * sp.inner] - lse;
        out[base + l * sp.inner] = log_space ? v : std::exp(v);
      }
    }
  }
  auto result = make_output(name, x.shape(), std::move(out), track);
  if (track) {
    record<T>([xn = x.node(), on = result.node(), sp, log_space] {
      if (on->grad.empty()) return;
      T* gx = grad_of(xn);
      if (!gx) return;
      const auto& gy = on->grad;
      const auto& y = on->value;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t base = o * sp.len * sp.inner + i;
          T s{0};
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t k = base + l * sp.inner;
            s += log_space ? gy[k] : gy[k] * y[k];
          }
          for (std::size_t l = 0; l < sp.len; ++l) {
            const std::size_t k = base + l * sp.inner;
            gx[k] += log_space ? gy[k] - std::exp(y[k]) * s : y[k] * (gy[k] - s);
          }
        }
      }
    });
  }
  return result;
}

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     to_string(s));
  }
}

void require_shape(const Shape& s, const Shape& want, const char* op, const char* what) {
  if (s != want) {
    throw ShapeError(std::string(op) + ": " + what + " has shape " + to_string(s) + ", expected " +
                     to_string(want));
  }
}

}  // namespace

// ------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kAdd, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kSub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kMul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return unary(x, "softplus", [](T v) { return softplus_scalar(v); }, [](T v, T) { return sigmoid_scalar(v); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary(
      x, "silu", [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(x, "sigmoid", [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

// ------------------------------------------------------------------ linear

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return linear(a, b, Tensor<T>{});
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (x.rank() < 1) throw ShapeError("matmul: left operand must have rank >= 1");
  require_rank(w.shape(), 2, "matmul", "right operand");
  const std::size_t k = x.shape().back();
  if (w.shape()[0] != k) {
    throw ShapeError("matmul: inner extents differ, " + to_string(x.shape()) + " x " + to_string(w.shape()));
  }
  const std::size_t n = w.shape()[1];
  if (bias.defined()) require_shape(bias.shape(), Shape{n}, "linear", "bias");
  const std::size_t m = x.numel() / std::max<std::size_t>(k, 1);
  const bool track = tracks({&x, &w, &bias});
  Shape out_shape = x.shape();
  out_shape.back() = n;
  std::vector<T> out(m * n);
  if (bias.defined()) {
    for (std::size_t i = 0; i < m; ++i) std::copy(bias.values().begin(), bias.values().end(), out.begin() + i * n);
  }
  kernels::gemm<T>(GemmDims{m, n, k}, x.values(), w.values(), out, bias.defined());
  auto result = make_output(bias.defined() ? "linear" : "matmul", std::move(out_shape), std::move(out), track);
  if (track) {
    record<T>([xn = x.node(), wn = w.node(), bn = bias.node(), on = result.node(), m, n, k] {
      if (on->grad.empty()) return;
      const std::span<const T> gy(on->grad);
      if (T* gx = grad_of(xn)) {
        kernels::gemm<T>(GemmDims{m, k, n, false, true}, gy, wn->value, std::span<T>(gx, m * k), true);
      }
      if (T* gw = grad_of(wn)) {
        kernels::gemm<T>(GemmDims{k, n, m, true, false}, xn->value, gy, std::span<T>(gw, k * n), true);
      }
      if (T* gb = grad_of(bn)) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) gb[j] += gy[i * n + j];
        }
      }
    });
  }
  return result;
}

// ------------------------------------------------------------ convolutions

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank(x.shape(), 4, "conv2d", "input");
  require_rank(w.shape(), 4, "conv2d", "weight");
  Conv2dDims d{x.shape()[0], x.shape()[1], w.shape()[0], x.shape()[2], x.shape()[3], w.shape()[2]};
  if (w.shape()[1] != d.in_channels) {
    throw ShapeError("conv2d: weight expects " + std::to_string(w.shape()[1]) + " input channels, got " +
                     std::to_string(d.in_channels));
  }
  if (w.shape()[3] != d.kernel || d.kernel % 2 == 0) throw ShapeError("conv2d: kernel must be square and odd");
  if (bias.defined()) require_shape(bias.shape(), Shape{d.out_channels}, "conv2d", "bias");
  const bool track = tracks({&x, &w, &bias});
  std::vector<T> out(d.frames * d.out_channels * d.height * d.width);
  kernels::conv2d_forward<T>(d, x.values(), w.values(),
                             bias.defined() ? bias.values() : std::span<const T>{}, out);
  auto result = make_output("conv2d", Shape{d.frames, d.out_channels, d.height, d.width}, std::move(out), track);
  if (track) {
    record<T>([xn = x.node(), wn = w.node(), bn = bias.node(), on = result.node(), d] {
      if (on->grad.empty()) return;
      T* gx = grad_of(xn);
      T* gw = grad_of(wn);
      T* gb = grad_of(bn);
      kernels::conv2d_backward<T>(d, xn->value, wn->value, on->grad,
                                  gx ? std::span<T>(gx, xn->value.size()) : std::span<T>{},
                                  gw ? std::span<T>(gw, wn->value.size()) : std::span<T>{},
                                  gb ? std::span<T>(gb, bn->value.size()) : std::span<T>{});
    });
  }
  return result;
}

template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank(x.shape(), 3, "depthwise_conv1d", "input");
  require_rank(w.shape(), 2, "depthwise_conv1d", "weight");
  Conv1dDims d{x.shape()[0], x.shape()[1], x.shape()[2], w.shape()[1]};
  if (w.shape()[0] != d.channels) {
    throw ShapeError("depthwise_conv1d: weight has " + std::to_string(w.shape()[0]) + " channels, input has " +
                     std::to_string(d.channels));
  }
  if (bias.defined()) require_shape(bias.shape(), Shape{d.channels}, "depthwise_conv1d", "bias");
  const bool track = tracks({&x, &w, &bias});
  std::vector<T> out(x.numel());
  kernels::depthwise_conv1d_forward<T>(d, x.values(), w.values(),
                                       bias.defined() ? bias.values() : std::span<const T>{}, out);
  auto result = make_output("depthwise_conv1d", x.shape(), std::move(out), track);
  if (track) {
    record<T>([xn = x.node(), wn = w.node(), bn = bias.node(), on = result.node(), d] {
      if (on->grad.empty()) return;
      T* gx = grad_of(xn);
      T* gw = grad_of(wn);
      T* gb = grad_of(bn);
      kernels::depthwise_conv1d_backward<T>(d, xn->value, wn->value, on->grad,
                                            gx ? std::span<T>(gx, xn->value.size()) : std::span<T>{},
                                            gw ? std::span<T>(gw, wn->value.size()) : std::span<T>{},
                                            gb ? std::span<T>(gb, bn->value.size()) : std::span<T>{});
    });
  }
  return result;
}

// -------------------------------------------------------------- reductions

template <typename T>
Tensor<T> max_over_axis(const Tensor<T>& x, std::size_t axis) {
  return max_impl(x, axis, {}, "max_over_axis");
}

template <typename T>
Tensor<T> masked_max_over_axis(const Tensor<T>& x, std::size_t axis, std::span<const std::uint8_t> valid) {
  if (valid.empty()) throw ShapeError("masked_max_over_axis: empty mask");
  return max_impl(x, axis, valid, "masked_max_over_axis");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const bool track = tracks({&x});
  T s{0};
  for (T v : x.values()) s += v;
  auto result = make_output("sum", Shape{}, std::vector<T>{s}, track);
  if (track) {
    record<T>([xn = x.node(), on = result.node()] {
      if (on->grad.empty()) return;
      T* gx = grad_of(xn);
      if (!gx) return;
      const T g = on->grad[0];
      for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += g;
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------- layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  const bool track = tracks({&x});
  auto result = make_output("reshape", std::move(shape), x.node()->value, track);
  if (track) {
    record<T>([xn = x.node(), on = result.node()] {
      if (on->grad.empty()) return;
      T* gx = grad_of(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const auto& in = x.shape();
  const std::size_t rank = in.size();
  if (axes.size() != rank) throw ShapeError("permute: axes length differs from rank");
  std::vector<bool> seen(rank, false);
  for (auto a : axes) {
    if (a >= rank || seen[a]) throw ShapeError("permute: axes are not a permutation");
    seen[a] = true;
  }
  const auto in_strides = contiguous_strides(in);
  Shape out_shape(rank);
  // Broadcast machinery with b unused: stride_a walks the source.
  Broadcast bc;
  bc.out.resize(rank);
  bc.stride_a.resize(rank);
  bc.stride_b.assign(rank, 0);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in[axes[i]];
    bc.out[i] = in[axes[i]];
    bc.stride_a[i] = in_strides[axes[i]];
  }
  const bool track = tracks({&x});
  const auto& xv = x.node()->value;
  std::vector<T> out(xv.size());
  broadcast_loop(bc, [&](std::size_t o, std::size_t src, std::size_t) { out[o] = xv[src]; });
  auto result = make_output("permute", std::move(out_shape), std::move(out), track);
  if (track) {
    record<T>([xn = x.node(), on = result.node(), bc] {
      if (on->grad.empty()) return;
      T* gx = grad_of(xn);
      if (!gx) return;
      broadcast_loop(bc, [&](std::size_t o, std::size_t src, std::size_t) { gx[src] += on->grad[o]; });
    });
  }
  return result;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::size_t axis0, std::size_t axis1) {
  if (axis0 >= x.rank() || axis1 >= x.rank()) throw ShapeError("transpose: axis out of range");
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[axis0], axes[axis1]);
  return permute(x, axes);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto sp = split_axis(x.shape(), axis, "slice");
  if (start + length > sp.len) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") exceeds extent " + std::to_string(sp.len));
  }
  const bool track = tracks({&x});
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const auto& xv = x.node()->value;
  std::vector<T> out(sp.outer * length * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * sp.len + start) * sp.inner), length * sp.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * sp.inner));
  }
  auto result = make_output("slice", std::move(out_shape), std::move(out), track);
  if (track) {
    record<T>([xn = x.node(), on = result.node(), sp, start, length] {
      if (on->grad.empty()) return;
      T* gx = grad_of(xn);
      if (!gx) return;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < length * sp.inner; ++i) {
          gx[(o * sp.len + start) * sp.inner + i] += on->grad[o * length * sp.inner + i];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range");
  std::size_t total_len = 0;
  bool track = false;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.shape()[i] != ref[i]) {
        throw ShapeError("concat: " + to_string(p.shape()) + " incompatible with " + to_string(ref));
      }
    }
    total_len += p.shape()[axis];
    track = track || tracks({&p});
  }
  Shape out_shape = ref;
  out_shape[axis] = total_len;
  const auto sp = split_axis(out_shape, axis, "concat");
  std::vector<T> out(numel_of(out_shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis];
    offsets.push_back(offset);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(p.values().begin() + static_cast<std::ptrdiff_t>(o * len * sp.inner), len * sp.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total_len + offset) * sp.inner));
    }
    offset += len;
  }
  auto result = make_output("concat", std::move(out_shape), std::move(out), track);
  if (track) {
    std::vector<NodePtr<T>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    record<T>([nodes, on = result.node(), offsets, sp, axis] {
      if (on->grad.empty()) return;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        T* gp = grad_of(nodes[k]);
        if (!gp) continue;
        const std::size_t len = nodes[k]->shape[axis];
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t i = 0; i < len * sp.inner; ++i) {
            gp[o * len * sp.inner + i] += on->grad[(o * sp.len + offsets[k]) * sp.inner + i];
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  return softmax_impl(x, axis, false);
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  return softmax_impl(x, axis, true);
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& weight, T eps) {
  if (x.rank() < 1) throw ShapeError("rms_norm: input must have rank >= 1");
  const std::size_t n = x.shape().back();
  require_shape(weight.shape(), Shape{n}, "rms_norm", "weight");
  const std::size_t rows = x.numel() / std::max<std::size_t>(n, 1);
  const bool track = tracks({&x, &weight});
  const auto& xv = x.node()->value;
  const auto& wv = weight.node()->value;
  std::vector<T> out(xv.size()), inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T ss{0};
    for (std::size_t i = 0; i < n; ++i) ss += xv[r * n + i] * xv[r * n + i];
    inv[r] = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = xv[r * n + i] * inv[r] * wv[i];
  }
  auto result = make_output("rms_norm", x.shape(), std::move(out), track);
  if (track) {
    record<T>([xn = x.node(), wn = weight.node(), on = result.node(), inv = std::move(inv), rows, n] {
      if (on->grad.empty()) return;
      T* gx = grad_of(xn);
      T* gw = grad_of(wn);
      const auto& gy = on->grad;
      const auto& xv = xn->value;
      const auto& wv = wn->value;
      for (std::size_t r = 0; r < rows; ++r) {
        const T ir = inv[r];
        T dot{0};
        for (std::size_t i = 0; i < n; ++i) dot += gy[r * n + i] * wv[i] * xv[r * n + i];
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t k = r * n + i;
          if (gw) gw[i] += gy[k] * xv[k] * ir;
          if (gx) gx[k] += ir * wv[i] * gy[k] - ir * ir * ir * xv[k] * dot / static_cast<T>(n);
        }
      }
    });
  }
  return result;
}

// --------------------------------------------------------------- batchnorm

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                    Tensor<T>& running_var, bool training, T momentum, T eps) {
  if (x.rank() < 2) throw ShapeError("batchnorm: input must have rank >= 2");
  const std::size_t batch = x.shape()[0];
  const std::size_t channels = x.shape()[1];
  const std::size_t spatial = x.numel() / std::max<std::size_t>(batch * channels, 1);
  const Shape cshape{channels};
  require_shape(gamma.shape(), cshape, "batchnorm", "gamma");
  require_shape(beta.shape(), cshape, "batchnorm", "beta");
  require_shape(running_mean.shape(), cshape, "batchnorm", "running_mean");
  require_shape(running_var.shape(), cshape, "batchnorm", "running_var");
  const std::size_t count = batch * spatial;
  if (training && count < 2) throw ShapeError("batchnorm: training needs more than one value per channel");
  const bool track = tracks({&x, &gamma, &beta});
  const auto& xv = x.node()->value;
  std::vector<T> mu(channels), invstd(channels);
  std::vector<T> out(xv.size());
  auto rm = running_mean.values_mut();
  auto rv = running_var.values_mut();
  const auto nch = static_cast<std::ptrdiff_t>(channels);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < nch; ++c) {
    if (training) {
      double s = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = xv.data() + (n * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* p = xv.data() + (n * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) {
          const double dv = p[i] - m;
          ss += dv * dv;
        }
      }
      const double var = ss / static_cast<double>(count);
      mu[c] = static_cast<T>(m);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      rm[c] = (T(1) - momentum) * rm[c] + momentum * static_cast<T>(m);
      rv[c] = (T(1) - momentum) * rv[c] + momentum * static_cast<T>(ss / static_cast<double>(count - 1));
    } else {
      mu[c] = rm[c];
      invstd[c] = T(1) / std::sqrt(rv[c] + eps);
    }
    const T g = gamma[c] * invstd[c];
    const T bb = beta[c];
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) out[off + i] = (xv[off + i] - mu[c]) * g + bb;
    }
  }
  auto result = make_output("batchnorm", x.shape(), std::move(out), track);
  if (track) {
    record<T>([xn = x.node(), gn = gamma.node(), bn = beta.node(), on = result.node(), mu, invstd, batch, channels,
               spatial, count, training] {
      if (on->grad.empty()) return;
      T* gx = grad_of(xn);
      T* gg = grad_of(gn);
      T* gb = grad_of(bn);
      const auto& gy = on->grad;
      const auto& xv = xn->value;
      const auto nch = static_cast<std::ptrdiff_t>(channels);
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t c = 0; c < nch; ++c) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t n = 0; n < batch; ++n) {
          const std::size_t off = (n * channels + c) * spatial;
          for (std::size_t i = 0; i < spatial; ++i) {
            const double xh = (xv[off + i] - mu[c]) * invstd[c];
            sum_g += gy[off + i];
            sum_gx += gy[off + i] * xh;
          }
        }
        if (gb) gb[c] += static_cast<T>(sum_g);
        if (gg) gg[c] += static_cast<T>(sum_gx);
        if (!gx) continue;
        const T k = gn->value[c] * invstd[c];
        const T mean_g = static_cast<T>(sum_g / static_cast<double>(count));
        const T mean_gx = static_cast<T>(sum_gx / static_cast<double>(count));
        for (std::size_t n = 0; n < batch; ++n) {
          const std::size_t off = (n * channels + c) * spatial;
          for (std::size_t i = 0; i < spatial; ++i) {
            if (training) {
              const T xh = (xv[off + i] - mu[c]) * invstd[c];
              gx[off + i] += k * (gy[off + i] - mean_g - xh * mean_gx);
            } else {
              gx[off + i] += k * gy[off + i];
            }
          }
        }
      }
    });
  }
  return result;
}

// --------------------------------------------------------------------- SSM

template <typename T>
std::pair<Tensor<T>, Tensor<T>> zoh_discretize(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& delta) {
  require_rank(a.shape(), 2, "zoh_discretize", "a");
  require_rank(b.shape(), 3, "zoh_discretize", "b");
  require_rank(delta.shape(), 3, "zoh_discretize", "delta");
  const std::size_t D = a.shape()[0], N = a.shape()[1];
  const std::size_t B = delta.shape()[0], L = delta.shape()[1];
  require_shape(delta.shape(), Shape{B, L, D}, "zoh_discretize", "delta");
  require_shape(b.shape(), Shape{B, L, N}, "zoh_discretize", "b");
  const bool track = tracks({&a, &b, &delta});
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  const auto& dv = delta.node()->value;
  std::vector<T> abar(B * L * D * N), bbar(B * L * D * N);
  for (std::size_t r = 0; r < B * L; ++r) {
    for (std::size_t d = 0; d < D; ++d) {
      const T dt = dv[r * D + d];
      for (std::size_t n = 0; n < N; ++n) {
        const auto zp = discretize_zoh(av[d * N + n], bv[r * N + n], dt);
        abar[(r * D + d) * N + n] = zp.a_bar;
        bbar[(r * D + d) * N + n] = zp.b_bar;
      }
    }
  }
  Shape out_shape{B, L, D, N};
  auto ra = make_output("zoh_discretize", out_shape, std::move(abar), track);
  auto rb = make_output("zoh_discretize", out_shape, std::move(bbar), track);
  if (track) {
    record<T>([an = a.node(), bn = b.node(), dn = delta.node(), oa = ra.node(), ob = rb.node(), B, L, D, N] {
      if (oa->grad.empty() && ob->grad.empty()) return;
      T* ga = grad_of(an);
      T* gb = grad_of(bn);
      T* gd = grad_of(dn);
      for (std::size_t r = 0; r < B * L; ++r) {
        for (std::size_t d = 0; d < D; ++d) {
          const T dt = dn->value[r * D + d];
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t o = (r * D + d) * N + n;
            const T av = an->value[d * N + n];
            const T bv = bn->value[r * N + n];
            const T z = dt * av;
            const T ga_bar = oa->grad.empty() ? T{0} : oa->grad[o];
            const T gb_bar = ob->grad.empty() ? T{0} : ob->grad[o];
            const T abar = oa->value[o];
            const T phi = zoh_phi(z);
            const T dphi = zoh_phi_derivative(z);
            if (ga) ga[d * N + n] += ga_bar * dt * abar + gb_bar * dt * dt * dphi * bv;
            if (gd) gd[r * D + d] += ga_bar * av * abar + gb_bar * bv * (phi + z * dphi);
            if (gb) gb[r * N + n] += gb_bar * dt * phi;
          }
        }
      }
    });
  }
  return {ra, rb};
}

template <typename T>
Tensor<T> scan_recurrence(const Tensor<T>& a_bar, const Tensor<T>& b_bar, const Tensor<T>& c, const Tensor<T>& x,
                          const Tensor<T>& h0) {
  require_rank(a_bar.shape(), 4, "scan_recurrence", "a_bar");
  const std::size_t B = a_bar.shape()[0], L = a_bar.shape()[1], D = a_bar.shape()[2], N = a_bar.shape()[3];
  require_shape(b_bar.shape(), a_bar.shape(), "scan_recurrence", "b_bar");
  require_shape(c.shape(), Shape{B, L, N}, "scan_recurrence", "c");
  require_shape(x.shape(), Shape{B, L, D}, "scan_recurrence", "x");
  if (h0.defined()) require_shape(h0.shape(), Shape{B, D, N}, "scan_recurrence", "h0");
  const bool track = tracks({&a_bar, &b_bar, &c, &x, &h0});
  const auto& av = a_bar.node()->value;
  const auto& bv = b_bar.node()->value;
  const auto& cv = c.node()->value;
  const auto& xv = x.node()->value;
  std::vector<T> hs(B * L * D * N);
  std::vector<T> y(B * L * D);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t r = b * L + t;
      for (std::size_t d = 0; d < D; ++d) {
        T acc{0};
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t s = (r * D + d) * N + n;
          const T prev = t ? hs[s - D * N] : (h0.defined() ? h0[(b * D + d) * N + n] : T{0});
          hs[s] = av[s] * prev + bv[s] * xv[r * D + d];
          acc += cv[r * N + n] * hs[s];
        }
        y[r * D + d] = acc;
      }
    }
  }
  auto result = make_output("scan_recurrence", Shape{B, L, D}, std::move(y), track);
  if (track) {
    record<T>([an = a_bar.node(), bn = b_bar.node(), cn = c.node(), xn = x.node(), hn = h0.node(),
               on = result.node(), hs = std::move(hs), B, L, D, N] {
      if (on->grad.empty()) return;
      T* ga = grad_of(an);
      T* gb = grad_of(bn);
      T* gc = grad_of(cn);
      T* gx = grad_of(xn);
      T* gh0 = grad_of(hn);
      const auto& gy = on->grad;
      std::vector<T> lam(D * N);
      for (std::size_t b = 0; b < B; ++b) {
        std::fill(lam.begin(), lam.end(), T{0});
        for (std::size_t t = L; t-- > 0;) {
          const std::size_t r = b * L + t;
          for (std::size_t d = 0; d < D; ++d) {
            const T g = gy[r * D + d];
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t s = (r * D + d) * N + n;
              // lam holds a_bar_{t+1} * adj(h_{t+1}) on entry.
              const T adj = lam[d * N + n] + g * cn->value[r * N + n];
              const T prev = t ? hs[s - D * N] : (hn ? hn->value[(b * D + d) * N + n] : T{0});
              if (gc) gc[r * N + n] += g * hs[s];
              if (ga) ga[s] += adj * prev;
              if (gb) gb[s] += adj * xn->value[r * D + d];
              if (gx) gx[r * D + d] += adj * bn->value[s];
              lam[d * N + n] = adj * an->value[s];
              if (t == 0 && gh0) gh0[(b * D + d) * N + n] += lam[d * N + n];
            }
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& a_log, const Tensor<T>& b,
                         const Tensor<T>& c, const Tensor<T>& d_skip) {
  require_rank(u.shape(), 3, "selective_scan", "u");
  require_rank(a_log.shape(), 2, "selective_scan", "a_log");
  ScanDims dims{u.shape()[0], u.shape()[1], u.shape()[2], a_log.shape()[1]};
  require_shape(delta.shape(), u.shape(), "selective_scan", "delta");
  require_shape(a_log.shape(), Shape{dims.channels, dims.state}, "selective_scan", "a_log");
  require_shape(b.shape(), Shape{dims.batch, dims.length, dims.state}, "selective_scan", "b");
  require_shape(c.shape(), Shape{dims.batch, dims.length, dims.state}, "selective_scan", "c");
  if (d_skip.defined()) require_shape(d_skip.shape(), Shape{dims.channels}, "selective_scan", "d_skip");
  for (T v : delta.values()) {
    if (!(v > T(0))) throw std::invalid_argument("selective_scan: delta must be positive");
  }
  const bool track = tracks({&u, &delta, &a_log, &b, &c, &d_skip});
  std::vector<T> a(a_log.numel());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(a_log[i]);
  ScanInputs<T> in{u.values(), delta.values(), a, b.values(), c.values(),
                   d_skip.defined() ? d_skip.values() : std::span<const T>{}};
  std::vector<T> y(u.numel());
  kernels::selective_scan_forward<T>(dims, in, y);
  auto result = make_output("selective_scan", u.shape(), std::move(y), track);
  if (track) {
    record<T>([un = u.node(), dn = delta.node(), ln = a_log.node(), bn = b.node(), cn = c.node(), sn = d_skip.node(),
               on = result.node(), a = std::move(a), dims] {
      if (on->grad.empty()) return;
      auto span_of = [](const NodePtr<T>& n) {
        T* g = grad_of(n);
        return g ? std::span<T>(g, n->value.size()) : std::span<T>{};
      };
      std::vector<T> ga(ln->requires_grad ? a.size() : 0, T{0});
      ScanInputs<T> in{un->value, dn->value, a, bn->value, cn->value,
                       sn ? std::span<const T>(sn->value) : std::span<const T>{}};
      ScanGrads<T> g{span_of(un), span_of(dn), ga, span_of(bn), span_of(cn), span_of(sn)};
      kernels::selective_scan_backward<T>(dims, in, on->grad, g);
      if (T* gl = grad_of(ln)) {
        // a = -exp(a_log) so d a / d a_log = a.
        for (std::size_t i = 0; i < a.size(); ++i) gl[i] += ga[i] * a[i];
      }
    });
  }
  return result;
}

#define SITSMAMBA_INSTANTIATE_OPS(T)                                                                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                                \
  template Tensor<T> exp(const Tensor<T>&);                                                                     \
  template Tensor<T> log(const Tensor<T>&);                                                                     \
  template Tensor<T> softplus(const Tensor<T>&);                                                                \
  template Tensor<T> silu(const Tensor<T>&);                                                                    \
  template Tensor<T> relu(const Tensor<T>&);                                                                    \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> depthwise_conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> max_over_axis(const Tensor<T>&, std::size_t);                                              \
  template Tensor<T> masked_max_over_axis(const Tensor<T>&, std::size_t, std::span<const std::uint8_t>);        \
  template Tensor<T> sum(const Tensor<T>&);                                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                                    \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                          \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                                \
  template Tensor<T> transpose(const Tensor<T>&, std::size_t, std::size_t);                                     \
  template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                            \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                        \
  template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, T);                                           \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                                    \
  template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);                                                \
  template Tensor<T> batchnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&,    \
                               bool, T, T);                                                                     \
  template std::pair<Tensor<T>, Tensor<T>> zoh_discretize(const Tensor<T>&, const Tensor<T>&,                   \
                                                          const Tensor<T>&);                                    \
  template Tensor<T> scan_recurrence(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                     const Tensor<T>&);                                                         \
  template Tensor<T> selective_scan(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                    const Tensor<T>&, const Tensor<T>&);

SITSMAMBA_INSTANTIATE_OPS(float)
SITSMAMBA_INSTANTIATE_OPS(double)

}  // namespace sitsmamba
