#include "sitsmamba/ssm.hpp"

#include <cmath>
#include <stdexcept>

namespace sitsmamba {

template <typename T>
SsmParams<T> SsmParams<T>::init(const MambaConfig& config, Rng& rng) {
  SsmParams p;
  p.d_inner = config.d_inner();
  p.d_state = config.d_state;
  p.dt_rank = config.resolved_dt_rank();
  p.to_dt = Linear<T>::init(p.d_inner, p.dt_rank, false, rng);
  p.to_b = Linear<T>::init(p.d_inner, p.d_state, false, rng);
  p.to_c = Linear<T>::init(p.d_inner, p.d_state, false, rng);

  p.dt_proj.weight = uniform_tensor<T>({p.dt_rank, p.d_inner}, 1.0 / std::sqrt(static_cast<double>(p.dt_rank)), rng);
  std::vector<T> dt_bias(p.d_inner);
  const double lo = std::log(config.dt_min);
  const double hi = std::log(config.dt_max);
  for (auto& b : dt_bias) {
    const double dt = std::max(std::exp(rng.uniform(0.0, 1.0) * (hi - lo) + lo), config.dt_init_floor);
    b = static_cast<T>(dt + std::log(-std::expm1(-dt)));  // softplus^-1(dt)
  }
  p.dt_proj.bias = Tensor<T>({p.d_inner}, std::move(dt_bias), true);

  std::vector<T> a_log(p.d_inner * p.d_state);
  for (std::size_t d = 0; d < p.d_inner; ++d) {
    for (std::size_t n = 0; n < p.d_state; ++n) a_log[d * p.d_state + n] = static_cast<T>(std::log(double(n + 1)));
  }
  p.a_log = Tensor<T>({p.d_inner, p.d_state}, std::move(a_log), true);
  p.d_skip = Tensor<T>::full({p.d_inner}, T(1), true);
  return p;
}

template <typename T>
Tensor<T> SsmParams<T>::a() const {
  std::vector<T> v(a_log.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = -std::exp(a_log[i]);
  return Tensor<T>(a_log.shape(), std::move(v));
}

template <typename T>
void SsmParams<T>::collect(const std::string& prefix, ParamList<T>& out) {
  out.push_back({prefix + ".a_log", &a_log, true});
  out.push_back({prefix + ".d_skip", &d_skip, true});
  to_dt.collect(prefix + ".to_dt", out);
  to_b.collect(prefix + ".to_b", out);
  to_c.collect(prefix + ".to_c", out);
  dt_proj.collect(prefix + ".dt_proj", out);
}

template <typename T>
Selectivity<T> project_selectivity(const SsmParams<T>& params, const Tensor<T>& u) {
  if (u.rank() != 3 || u.shape()[2] != params.d_inner) {
    throw ShapeError("selective_scan: expected [B, L, " + std::to_string(params.d_inner) + "], got " +
                     to_string(u.shape()));
  }
  return {softplus(params.dt_proj(params.to_dt(u))), params.to_b(u), params.to_c(u)};
}

template <typename T>
Tensor<T> selective_scan(const SsmParams<T>& params, const Tensor<T>& u) {
  const auto sel = project_selectivity(params, u);
  return selective_scan(u, sel.delta, params.a_log, sel.b, sel.c, params.d_skip);
}

template <typename T>
Tensor<T> selective_scan_composite(const SsmParams<T>& params, const Tensor<T>& u) {
  const auto sel = project_selectivity(params, u);
  const auto a = scale(exp(params.a_log), T(-1));
  const auto [a_bar, b_bar] = zoh_discretize(a, sel.b, sel.delta);
  return add(scan_recurrence(a_bar, b_bar, sel.c, u), mul(u, params.d_skip));
}

template <typename T>
DiscreteStep<T> constant_step(const Tensor<T>& a_bar, const Tensor<T>& b_bar, const Tensor<T>& c,
                              std::size_t length) {
  if (a_bar.rank() != 2 || b_bar.shape() != a_bar.shape() || c.shape() != Shape{a_bar.shape()[1]}) {
    throw ShapeError("constant_step: expected a_bar, b_bar [D, N] and c [N]");
  }
  auto tile = [length](const Tensor<T>& t) {
    Shape s{length};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    std::vector<T> v;
    v.reserve(numel_of(s));
    for (std::size_t l = 0; l < length; ++l) v.insert(v.end(), t.values().begin(), t.values().end());
    return Tensor<T>(std::move(s), std::move(v));
  };
  return {tile(a_bar), tile(b_bar), tile(c)};
}

template <typename T>
Tensor<T> scan_recurrence(const DiscreteStep<T>& steps, const Tensor<T>& x, const Tensor<T>& h0,
                          const Tensor<T>& d_skip) {
  if (x.rank() != 2) throw ShapeError("scan_recurrence: x must be [L, D]");
  const std::size_t L = steps.length();
  if (x.shape()[0] != L) {
    throw ShapeError("scan_recurrence: sequence length " + std::to_string(x.shape()[0]) + " != " +
                     std::to_string(L) + " steps");
  }
  const std::size_t D = steps.a_bar.shape()[1];
  const std::size_t N = steps.a_bar.shape()[2];
  auto batched = [](const Tensor<T>& t) {
    Shape s{1};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    return reshape(t, std::move(s));
  };
  Tensor<T> h0b = h0.defined() ? reshape(h0, Shape{1, D, N}) : Tensor<T>{};
  auto y = reshape(scan_recurrence(batched(steps.a_bar), batched(steps.b_bar), batched(steps.c), batched(x), h0b),
                   Shape{L, D});
  if (d_skip.defined()) y = add(y, mul(x, d_skip));
  return y;
}

namespace {

template <typename T>
void require_time_invariant(const DiscreteStep<T>& steps) {
  auto check = [](const Tensor<T>& t) {
    const std::size_t per = t.numel() / t.shape()[0];
    for (std::size_t l = 1; l < t.shape()[0]; ++l) {
      for (std::size_t i = 0; i < per; ++i) {
        if (t[l * per + i] != t[i]) {
          throw std::invalid_argument("kernel_convolve: parameters vary over time; use scan_recurrence");
        }
      }
    }
  };
  check(steps.a_bar);
  check(steps.b_bar);
  check(steps.c);
}

}  // namespace

template <typename T>
Tensor<T> ssm_kernel(const DiscreteStep<T>& steps) {
  require_time_invariant(steps);
  const std::size_t L = steps.length();
  const std::size_t D = steps.a_bar.shape()[1];
  const std::size_t N = steps.a_bar.shape()[2];
  std::vector<T> k(L * D, T{0});
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t n = 0; n < N; ++n) {
      const T a = steps.a_bar[d * N + n];
      T power = T(1);
      for (std::size_t l = 0; l < L; ++l) {
        k[l * D + d] += steps.c[n] * power * steps.b_bar[d * N + n];
        power *= a;
      }
    }
  }
  return Tensor<T>({L, D}, std::move(k));
}

template <typename T>
Tensor<T> kernel_convolve(const DiscreteStep<T>& steps, const Tensor<T>& x) {
  const auto k = ssm_kernel(steps);
  const std::size_t L = steps.length();
  const std::size_t D = k.shape()[1];
  if (x.shape() != Shape{L, D}) {
    throw ShapeError("kernel_convolve: x has shape " + to_string(x.shape()) + ", expected " + to_string({L, D}));
  }
  std::vector<T> y(L * D, T{0});
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t s = 0; s <= t; ++s) {
      for (std::size_t d = 0; d < D; ++d) y[t * D + d] += k[(t - s) * D + d] * x[s * D + d];
    }
  }
  return Tensor<T>({L, D}, std::move(y));
}

template <typename T>
MambaBlock<T> MambaBlock<T>::init(const MambaConfig& config, Rng& rng) {
  MambaBlock m;
  m.config = config;
  const std::size_t di = config.d_inner();
  m.in_x = Linear<T>::init(config.d_model, di, false, rng);
  m.in_z = Linear<T>::init(config.d_model, di, false, rng);
  const double conv_bound = 1.0 / std::sqrt(static_cast<double>(config.d_conv));
  m.conv_weight = uniform_tensor<T>({di, config.d_conv}, conv_bound, rng);
  m.conv_bias = uniform_tensor<T>({di}, conv_bound, rng);
  m.ssm = SsmParams<T>::init(config, rng);
  m.out = Linear<T>::init(di, config.d_model, true, rng);
  if (config.residual_norm) m.norm_weight = Tensor<T>::full({config.d_model}, T(1), true);
  return m;
}

template <typename T>
Tensor<T> MambaBlock<T>::operator()(const Tensor<T>& x) const {
  if (x.rank() != 3 || x.shape()[2] != config.d_model) {
    throw ShapeError("mamba_block: expected [B, L, " + std::to_string(config.d_model) + "], got " +
                     to_string(x.shape()));
  }
  const Tensor<T> xin = config.residual_norm ? rms_norm(x, norm_weight) : x;
  const auto main = silu(depthwise_conv1d(in_x(xin), conv_weight, conv_bias));
  const auto gate = silu(in_z(xin));
  auto y = out(mul(selective_scan(ssm, main), gate));
  return config.residual_norm ? add(x, y) : y;
}

template <typename T>
void MambaBlock<T>::collect(const std::string& prefix, ParamList<T>& out_params) {
  in_x.collect(prefix + ".in_x", out_params);
  in_z.collect(prefix + ".in_z", out_params);
  out_params.push_back({prefix + ".conv.weight", &conv_weight, true});
  out_params.push_back({prefix + ".conv.bias", &conv_bias, true});
  ssm.collect(prefix + ".ssm", out_params);
  out.collect(prefix + ".out", out_params);
  if (norm_weight.defined()) out_params.push_back({prefix + ".norm.weight", &norm_weight, true});
}

#define SITSMAMBA_INSTANTIATE_SSM(T)                                                                  \
  template struct SsmParams<T>;                                                                       \
  template struct MambaBlock<T>;                                                                      \
  template Selectivity<T> project_selectivity(const SsmParams<T>&, const Tensor<T>&);                 \
  template Tensor<T> selective_scan(const SsmParams<T>&, const Tensor<T>&);                           \
  template Tensor<T> selective_scan_composite(const SsmParams<T>&, const Tensor<T>&);                 \
  template DiscreteStep<T> constant_step(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                         std::size_t);                                                \
  template Tensor<T> scan_recurrence(const DiscreteStep<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                     const Tensor<T>&);                                               \
  template Tensor<T> ssm_kernel(const DiscreteStep<T>&);                                              \
  template Tensor<T> kernel_convolve(const DiscreteStep<T>&, const Tensor<T>&);

SITSMAMBA_INSTANTIATE_SSM(float)
SITSMAMBA_INSTANTIATE_SSM(double)

}  // namespace sitsmamba
