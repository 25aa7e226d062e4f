#include "sitsmamba/verify.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <ostream>

#include <boost/multiprecision/cpp_int.hpp>

#include "sitsmamba/losses.hpp"
#include "sitsmamba/metrics.hpp"
#include "sitsmamba/model.hpp"
#include "sitsmamba/ops.hpp"
#include "sitsmamba/rng.hpp"
#include "sitsmamba/spatial.hpp"
#include "sitsmamba/ssm.hpp"

namespace sitsmamba::verify {

using D = double;
using TD = Tensor<double>;

void Report::bound(const std::string& suite, const std::string& name, double measured, double tolerance,
                   std::string note) {
  checks_.push_back({suite, name, measured, tolerance, measured <= tolerance, std::move(note)});
}

void Report::expect(const std::string& suite, const std::string& name, bool ok, std::string note) {
  checks_.push_back({suite, name, ok ? 0.0 : 1.0, 0.0, ok, std::move(note)});
}

void Report::merge(const Report& other) { checks_.insert(checks_.end(), other.checks_.begin(), other.checks_.end()); }

bool Report::passed() const {
  return std::all_of(checks_.begin(), checks_.end(), [](const Check& c) { return c.passed; });
}

double Report::max_measured(const std::string& suite, const std::string& prefix) const {
  double m = 0;
  for (const auto& c : checks_) {
    if (c.suite == suite && c.name.rfind(prefix, 0) == 0) {
      if (std::isnan(c.measured)) return c.measured;
      m = std::max(m, c.measured);
    }
  }
  return m;
}

void Report::print(std::ostream& os) const {
  const auto flags = os.flags();
  os << std::left << std::setw(11) << "suite" << std::setw(58) << "check" << std::setw(13) << "measured"
     << std::setw(11) << "tolerance" << "result\n";
  for (const auto& c : checks_) {
    os << std::setw(11) << c.suite << std::setw(58) << c.name << std::setw(13) << std::setprecision(3)
       << std::scientific << c.measured << std::setw(11) << c.tolerance << (c.passed ? "pass" : "FAIL");
    if (!c.note.empty()) os << "  " << c.note;
    os << '\n';
  }
  os.flags(flags);
}

GradCheckResult gradcheck(const std::function<TD()>& loss, const std::vector<TD*>& leaves, double h,
                          const std::function<TD()>& numeric_loss) {
  Tape<D>::local().clear();
  for (auto* l : leaves) l->zero_grad();
  backward(loss());
  std::vector<std::vector<D>> analytic;
  for (auto* l : leaves) {
    if (l->has_grad()) {
      analytic.emplace_back(l->grad().begin(), l->grad().end());
    } else {
      analytic.emplace_back(l->numel(), 0.0);
    }
  }
  const auto& f = numeric_loss ? numeric_loss : loss;
  NoGradGuard guard;
  GradCheckResult r;
  double diff2 = 0, a2 = 0, n2 = 0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto v = leaves[li]->values_mut();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const D orig = v[i];
      v[i] = orig + h;
      const D fp = f().item();
      v[i] = orig - h;
      const D fm = f().item();
      v[i] = orig;
      const D num = (fp - fm) / (2 * h);
      const D an = analytic[li][i];
      diff2 += (an - num) * (an - num);
      a2 += an * an;
      n2 += num * num;
    }
    r.coordinates += v.size();
  }
  r.max_rel_error = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
  for (auto* l : leaves) l->zero_grad();
  return r;
}

namespace {

TD rand_t(Shape s, Rng& rng, double lo = -1, double hi = 1, bool grad = true) {
  std::vector<D> v(numel_of(s));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return TD(std::move(s), std::move(v), grad);
}

// Values bounded away from zero, for kinks (relu, max ties are separate).
TD rand_away(Shape s, Rng& rng, bool grad = true) {
  std::vector<D> v(numel_of(s));
  for (auto& x : v) x = (rng.uniform(0, 1) < 0.5 ? -1 : 1) * rng.uniform(0.1, 1.0);
  return TD(std::move(s), std::move(v), grad);
}

struct Case {
  Case(std::vector<TD> l, std::function<TD()> fn, std::function<TD()> num = {})
      : leaves(std::move(l)), f(std::move(fn)), numeric(std::move(num)) {}
  std::vector<TD> leaves;
  std::function<TD()> f;
  std::function<TD()> numeric;  // optional
};

using Builder = std::function<Case(Rng&)>;

template <typename M>
std::vector<TD> trainable(M& module, const std::string& prefix) {
  ParamList<D> list;
  module.collect(prefix, list);
  std::vector<TD> out;
  for (auto& p : list) {
    if (p.trainable) out.push_back(*p.tensor);
  }
  return out;
}

// Projects a tensor output to a scalar with fixed random weights so every
// output coordinate enters the gradient with a generic coefficient.
void run_case(Report& report, const std::string& name, std::size_t points, Rng& rng, const Builder& build,
              double tol = 1e-4) {
  double worst = 0;
  std::size_t coords = 0;
  for (std::size_t p = 0; p < points; ++p) {
    Case c = build(rng);
    TD w;
    {
      NoGradGuard g;
      w = rand_t(c.f().shape(), rng, -1, 1, false);
    }
    auto loss = [f = c.f, w] { return sum(mul(f(), w)); };
    std::function<TD()> numeric;
    if (c.numeric) numeric = [f = c.numeric, w] { return sum(mul(f(), w)); };
    std::vector<TD*> ptrs;
    for (auto& l : c.leaves) ptrs.push_back(&l);
    const auto r = gradcheck(loss, ptrs, 1e-5, numeric);
    if (std::isnan(r.max_rel_error)) worst = r.max_rel_error;
    if (!std::isnan(worst)) worst = std::max(worst, r.max_rel_error);
    coords += r.coordinates;
  }
  report.bound("gradient", name, worst, tol, std::to_string(points) + " points, " + std::to_string(coords) + " coords");
}

}  // namespace

Report gradient_suite(std::size_t points, std::uint64_t seed) {
  Report rep;
  Rng rng(seed);
  auto unary = [&](const std::string& name, TD (*op)(const TD&), bool away) {
    run_case(rep, name, points, rng, [op, away](Rng& r) {
      TD x = away ? rand_away({3, 4}, r) : rand_t({3, 4}, r, -2, 2);
      return Case{{x}, [x, op] { return op(x); }};
    });
  };
  unary("exp", exp<D>, false);
  unary("softplus", softplus<D>, false);
  unary("silu", silu<D>, false);
  unary("relu", relu<D>, true);
  unary("sigmoid", sigmoid<D>, false);
  run_case(rep, "log", points, rng, [](Rng& r) {
    TD x = rand_t({3, 4}, r, 0.5, 2.0);
    return Case{{x}, [x] { return log(x); }};
  });
  run_case(rep, "add (broadcast)", points, rng, [](Rng& r) {
    TD a = rand_t({2, 3, 4}, r), b = rand_t({3, 1}, r);
    return Case{{a, b}, [a, b] { return add(a, b); }};
  });
  run_case(rep, "sub (broadcast)", points, rng, [](Rng& r) {
    TD a = rand_t({4}, r), b = rand_t({2, 3, 4}, r);
    return Case{{a, b}, [a, b] { return sub(a, b); }};
  });
  run_case(rep, "mul (broadcast)", points, rng, [](Rng& r) {
    TD a = rand_t({2, 1, 4}, r), b = rand_t({3, 1}, r);
    return Case{{a, b}, [a, b] { return mul(a, b); }};
  });
  run_case(rep, "scale", points, rng, [](Rng& r) {
    TD a = rand_t({5}, r);
    return Case{{a}, [a] { return scale(a, -1.7); }};
  });
  run_case(rep, "matmul", points, rng, [](Rng& r) {
    TD a = rand_t({2, 3, 4}, r), b = rand_t({4, 5}, r);
    return Case{{a, b}, [a, b] { return matmul(a, b); }};
  });
  run_case(rep, "linear", points, rng, [](Rng& r) {
    TD x = rand_t({2, 3, 4}, r), w = rand_t({4, 3}, r), b = rand_t({3}, r);
    return Case{{x, w, b}, [x, w, b] { return linear(x, w, b); }};
  });
  run_case(rep, "conv2d", points, rng, [](Rng& r) {
    TD x = rand_t({2, 3, 5, 4}, r), w = rand_t({4, 3, 3, 3}, r), b = rand_t({4}, r);
    return Case{{x, w, b}, [x, w, b] { return conv2d(x, w, b); }};
  });
  run_case(rep, "depthwise_conv1d", points, rng, [](Rng& r) {
    TD x = rand_t({2, 6, 3}, r), w = rand_t({3, 4}, r), b = rand_t({3}, r);
    return Case{{x, w, b}, [x, w, b] { return depthwise_conv1d(x, w, b); }};
  });
  run_case(rep, "max_over_axis", points, rng, [](Rng& r) {
    TD x = rand_t({3, 4, 5}, r);
    return Case{{x}, [x] { return max_over_axis(x, 1); }};
  });
  run_case(rep, "masked_max_over_axis", points, rng, [](Rng& r) {
    TD x = rand_t({3, 4, 2}, r);
    std::vector<std::uint8_t> valid{1, 1, 0, 0, 1, 0, 0, 0, 1, 1, 1, 1};
    return Case{{x}, [x, valid] { return masked_max_over_axis(x, 1, valid); }};
  });
  run_case(rep, "sum", points, rng, [](Rng& r) {
    TD x = rand_t({3, 4}, r);
    return Case{{x}, [x] { return sum(mul(x, x)); }};
  });
  run_case(rep, "mean", points, rng, [](Rng& r) {
    TD x = rand_t({3, 4}, r);
    return Case{{x}, [x] { return mean(mul(x, x)); }};
  });
  run_case(rep, "reshape", points, rng, [](Rng& r) {
    TD x = rand_t({3, 4}, r);
    return Case{{x}, [x] { return mul(reshape(x, {2, 6}), reshape(x, {2, 6})); }};
  });
  run_case(rep, "permute", points, rng, [](Rng& r) {
    TD x = rand_t({2, 3, 4}, r);
    return Case{{x}, [x] { return permute(x, {2, 0, 1}); }};
  });
  run_case(rep, "transpose", points, rng, [](Rng& r) {
    TD x = rand_t({2, 3, 4}, r);
    return Case{{x}, [x] { return transpose(x, 0, 2); }};
  });
  run_case(rep, "slice", points, rng, [](Rng& r) {
    TD x = rand_t({2, 5, 3}, r);
    return Case{{x}, [x] { return slice(x, 1, 1, 3); }};
  });
  run_case(rep, "concat", points, rng, [](Rng& r) {
    TD a = rand_t({2, 2, 3}, r), b = rand_t({2, 1, 3}, r);
    return Case{{a, b}, [a, b] { return concat<D>({a, b, a}, 1); }};
  });
  run_case(rep, "rms_norm", points, rng, [](Rng& r) {
    TD x = rand_t({2, 3, 4}, r), w = rand_t({4}, r);
    return Case{{x, w}, [x, w] { return rms_norm(x, w); }};
  });
  run_case(rep, "softmax", points, rng, [](Rng& r) {
    TD x = rand_t({2, 4, 3}, r, -2, 2);
    return Case{{x}, [x] { return softmax(x, 1); }};
  });
  run_case(rep, "log_softmax", points, rng, [](Rng& r) {
    TD x = rand_t({2, 4, 3}, r, -2, 2);
    return Case{{x}, [x] { return log_softmax(x, 1); }};
  });
  run_case(rep, "batchnorm (training)", points, rng, [](Rng& r) {
    TD x = rand_t({4, 3, 2, 2}, r), g = rand_t({3}, r, 0.5, 1.5), b = rand_t({3}, r);
    TD rm = TD::zeros({3}), rv = TD::full({3}, 1.0);
    return Case{{x, g, b}, [x, g, b, rm, rv]() mutable { return batchnorm(x, g, b, rm, rv, true); }};
  });
  run_case(rep, "batchnorm (inference)", points, rng, [](Rng& r) {
    TD x = rand_t({4, 3, 2, 2}, r), g = rand_t({3}, r, 0.5, 1.5), b = rand_t({3}, r);
    TD rm = rand_t({3}, r, -1, 1, false), rv = rand_t({3}, r, 0.5, 2, false);
    return Case{{x, g, b}, [x, g, b, rm, rv]() mutable { return batchnorm(x, g, b, rm, rv, false); }};
  });
  run_case(rep, "zoh_discretize", points, rng, [](Rng& r) {
    TD a = rand_t({3, 2}, r, -2, -0.1), b = rand_t({2, 4, 2}, r), delta = rand_t({2, 4, 3}, r, 0.05, 1.0);
    return Case{{a, b, delta}, [a, b, delta] {
                  auto [ab, bb] = zoh_discretize(a, b, delta);
                  return add(ab, bb);
                }};
  });
  run_case(rep, "scan_recurrence", points, rng, [](Rng& r) {
    TD ab = rand_t({2, 5, 3, 2}, r, 0.1, 0.95), bb = rand_t({2, 5, 3, 2}, r), c = rand_t({2, 5, 2}, r);
    TD x = rand_t({2, 5, 3}, r), h0 = rand_t({2, 3, 2}, r);
    return Case{{ab, bb, c, x, h0}, [ab, bb, c, x, h0] { return scan_recurrence(ab, bb, c, x, h0); }};
  });
  run_case(rep, "selective_scan (fused)", points, rng, [](Rng& r) {
    TD u = rand_t({2, 6, 3}, r), delta = rand_t({2, 6, 3}, r, 0.05, 1.0), a_log = rand_t({3, 4}, r, -1, 1);
    TD b = rand_t({2, 6, 4}, r), c = rand_t({2, 6, 4}, r), d = rand_t({3}, r);
    return Case{{u, delta, a_log, b, c, d},
                [u, delta, a_log, b, c, d] { return selective_scan(u, delta, a_log, b, c, d); }};
  });

  auto tiny_mamba = [](bool residual) {
    MambaConfig mc;
    mc.d_model = 4;
    mc.d_state = 4;
    mc.residual_norm = residual;
    return mc;
  };
  for (bool residual : {false, true}) {
    run_case(rep, residual ? "mamba block (residual+norm)" : "mamba block", points, rng, [&](Rng& r) {
      auto block = MambaBlock<D>::init(tiny_mamba(residual), r);
      // spread dt so the fast and slow ZOH regimes both show up
      for (auto& v : block.ssm.dt_proj.bias.values_mut()) v = r.uniform(-2, 1);
      TD x = rand_t({2, 5, 4}, r);
      Case c{trainable(block, "m"), [block, x] { return block(x); }};
      c.leaves.push_back(x);
      return c;
    });
  }
  run_case(rep, "selective_scan (projections)", points, rng, [&](Rng& r) {
    auto ssm = SsmParams<D>::init(tiny_mamba(false), r);
    TD u = rand_t({2, 5, ssm.d_inner}, r);
    Case c{trainable(ssm, "s"), [ssm, u] { return selective_scan(ssm, u); }};
    c.leaves.push_back(u);
    return c;
  });
  run_case(rep, "convblock", points, rng, [](Rng& r) {
    auto block = ConvBlock<D>::init(2, 8, r);
    TD x = rand_t({1, 2, 4, 4}, r);
    Case c{trainable(block, "c"), [block, x]() mutable { return block(x, true); }};
    c.leaves.push_back(x);
    return c;
  });
  run_case(rep, "cls head", points, rng, [](Rng& r) {
    auto head = ClsHead<D>::init(6, 3, r);
    TD x = rand_t({2, 6, 3, 3}, r);
    Case c{trainable(head, "h"), [head, x]() mutable { return head(x, true); }};
    c.leaves.push_back(x);
    return c;
  });
  run_case(rep, "rbranch", points, rng, [](Rng& r) {
    auto lin = Linear<D>::init(5, 3, true, r);
    TD x = rand_t({4, 6, 5}, r);
    Case c{trainable(lin, "r"), [lin, x] { return rbranch_decode(lin, x); }};
    c.leaves.push_back(x);
    return c;
  });
  run_case(rep, "temporal maxpool", points, rng, [](Rng& r) {
    TD x = rand_t({3, 4, 2}, r);
    std::vector<std::uint8_t> valid{1, 1, 1, 0, 1, 1, 1, 1, 0, 1, 0, 0};
    return Case{{x}, [x, valid] { return temporal_maxpool(x, valid); }};
  });

  // The combined objective. w1 carries no gradient, so the numeric side
  // freezes it at the base point.
  run_case(rep, "combined loss", points, rng, [](Rng& r) {
    TD logits = rand_t({2, 3, 2, 2}, r, -2, 2), x = rand_t({2, 4, 2, 2, 2}, r, -1, 1, false);
    TD x_hat = rand_t({2, 4, 2, 2, 2}, r);
    std::vector<std::uint16_t> labels(8);
    for (auto& l : labels) l = static_cast<std::uint16_t>(r.uniform_int(0, 2));
    const std::vector<std::size_t> valid{4, 3};
    LossConfig cfg;
    double w1 = 0;
    {
      NoGradGuard g;
      w1 = classification_loss(logits, labels, {}).item() / reconstruction_loss(x, x_hat, valid, true).item();
    }
    auto analytic = [=] {
      return combined_loss(classification_loss(logits, labels, {}), reconstruction_loss(x, x_hat, valid, true), cfg);
    };
    auto frozen = [=] {
      return add(classification_loss(logits, labels, {}),
                 scale(reconstruction_loss(x, x_hat, valid, true), cfg.w0 * w1));
    };
    return Case{{logits, x_hat}, analytic, frozen};
  });
  return rep;
}

Report scan_kernel_suite(std::size_t instances, std::uint64_t seed) {
  Report rep;
  Rng rng(seed);
  NoGradGuard guard;
  double worst = 0;
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t L = rng.uniform_int(1, 32), Dn = rng.uniform_int(1, 8), N = rng.uniform_int(1, 8);
    const auto steps = constant_step(rand_t({Dn, N}, rng, 0.05, 0.99, false), rand_t({Dn, N}, rng, -1, 1, false),
                                     rand_t({N}, rng, -1, 1, false), L);
    const TD x = rand_t({L, Dn}, rng, -1, 1, false);
    const auto y1 = scan_recurrence(steps, x);
    const auto y2 = kernel_convolve(steps, x);
    for (std::size_t j = 0; j < y1.numel(); ++j) worst = std::max(worst, std::abs(y1[j] - y2[j]));
  }
  rep.bound("scan", "recurrence vs kernel, random LTI", worst, 1e-6, std::to_string(instances) + " instances, L<=32");

  // hand example: a_bar 0.5, b_bar 1, c 1, x = 1 1 1
  {
    const auto steps = constant_step(TD({1, 1}, {0.5}), TD({1, 1}, {1.0}), TD({1}, {1.0}), 3);
    const TD x({3, 1}, {1.0, 1.0, 1.0});
    const auto y = scan_recurrence(steps, x);
    const auto k = ssm_kernel(steps);
    const auto yk = kernel_convolve(steps, x);
    const double expect_y[3] = {1.0, 1.5, 1.75}, expect_k[3] = {1.0, 0.5, 0.25};
    double e = 0;
    for (int t = 0; t < 3; ++t) {
      e = std::max({e, std::abs(y[t] - expect_y[t]), std::abs(yk[t] - expect_y[t]), std::abs(k[t] - expect_k[t])});
    }
    rep.bound("scan", "hand example y=[1,1.5,1.75]", e, 0.0);
    const TD impulse({3, 1}, {1.0, 0.0, 0.0});
    const auto yi = kernel_convolve(steps, impulse);
    double ei = 0;
    for (int t = 0; t < 3; ++t) ei = std::max(ei, std::abs(yi[t] - expect_k[t]));
    rep.bound("scan", "impulse response equals kernel", ei, 0.0);
  }

  // fused selective scan with constant delta, B, C reduces to the LTI kernel
  double worst_sel = 0;
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t L = rng.uniform_int(1, 32), Dn = rng.uniform_int(1, 8), N = rng.uniform_int(1, 8);
    const TD a_log = rand_t({Dn, N}, rng, -1, 1, false), d_skip = rand_t({Dn}, rng, -1, 1, false);
    const TD bvec = rand_t({N}, rng, -1, 1, false), cvec = rand_t({N}, rng, -1, 1, false);
    const TD dvec = rand_t({Dn}, rng, 0.01, 1.0, false);
    const TD u = rand_t({1, L, Dn}, rng, -1, 1, false);
    std::vector<D> delta(L * Dn), b(L * N), c(L * N);
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t d = 0; d < Dn; ++d) delta[t * Dn + d] = dvec[d];
      for (std::size_t n = 0; n < N; ++n) {
        b[t * N + n] = bvec[n];
        c[t * N + n] = cvec[n];
      }
    }
    const auto y = selective_scan(u, TD({1, L, Dn}, delta), a_log, TD({1, L, N}, b), TD({1, L, N}, c), d_skip);
    std::vector<D> ab(Dn * N), bb(Dn * N);
    for (std::size_t d = 0; d < Dn; ++d) {
      for (std::size_t n = 0; n < N; ++n) {
        const auto z = discretize_zoh(-std::exp(a_log[d * N + n]), bvec[n], dvec[d]);
        ab[d * N + n] = z.a_bar;
        bb[d * N + n] = z.b_bar;
      }
    }
    const auto steps = constant_step(TD({Dn, N}, ab), TD({Dn, N}, bb), cvec, L);
    const auto yk = kernel_convolve(steps, reshape(u, {L, Dn}));
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t d = 0; d < Dn; ++d) {
        const D ref = yk[t * Dn + d] + d_skip[d] * u[t * Dn + d];
        worst_sel = std::max(worst_sel, std::abs(y[t * Dn + d] - ref));
      }
    }
  }
  rep.bound("scan", "selective scan LTI reduction vs kernel", worst_sel, 1e-6);

  bool threw = false;
  try {
    auto steps = constant_step(TD({1, 1}, {0.5}), TD({1, 1}, {1.0}), TD({1}, {1.0}), 2);
    steps.a_bar = TD({2, 1, 1}, {0.5, 0.6});
    kernel_convolve(steps, TD({2, 1}, {1.0, 1.0}));
  } catch (const std::invalid_argument&) {
    threw = true;
  }
  rep.expect("scan", "kernel rejects time-varying steps", threw);
  return rep;
}

Report zoh_suite(const ZohFn& discretize) {
  Report rep;
  auto pair_err = [](ZohPair<D> got, D a_bar, D b_bar) {
    return std::max(std::abs(got.a_bar - a_bar), std::abs(got.b_bar - b_bar));
  };
  // closed forms written out independently of the library
  rep.bound("zoh", "A=-1 dt=1 B=2", pair_err(discretize(-1, 2, 1), 0.36787944117144233, 1.2642411176571153), 1e-12);
  rep.bound("zoh", "A=-1 dt=1e-9 B=1", pair_err(discretize(-1, 1, 1e-9), 1.0 - 1e-9 + 5e-19, 1e-9 * (1 - 5e-10)),
            1e-12);
  rep.bound("zoh", "A=1 dt=ln2 B=1", pair_err(discretize(1, 1, std::numbers::ln2), 2.0, 1.0), 1e-12);

  {
    // the zero-step limit itself
    const auto z = discretize(-1, 1, 1e-9);
    rep.bound("zoh", "dt->0 limit: a_bar->1", std::abs(z.a_bar - 1.0), 2e-9);
    rep.bound("zoh", "dt->0 limit: b_bar->dt", std::abs(z.b_bar - 1e-9) / 1e-9, 2e-9);
  }

  // series fallback against the unguarded closed form at |dt A| = 1e-5
  double series = 0;
  for (D a : {-1.0, 1.0}) {
    const auto s = discretize_zoh_series<D>(a, 1.0, 1e-5);
    const auto e = discretize_zoh_exact<D>(a, 1.0, 1e-5);
    series = std::max(series, std::abs(s.b_bar - e.b_bar) / std::abs(e.b_bar));
  }
  rep.bound("zoh", "series vs exact at |dtA|=1e-5", series, 1e-9);

  // below the threshold the routine must take the series branch
  {
    const D z = -1e-7;
    const auto got = discretize(-1, 1, 1e-7);
    const D ref = 1e-7 * (1 + z / 2 + z * z / 6);
    rep.bound("zoh", "series branch at |dtA|=1e-7", std::abs(got.b_bar - ref) / 1e-7, 1e-12);
  }

  // stability: a_bar in (0, 1) for A < 0, dt > 0
  Rng rng(3);
  bool stable = true;
  for (int i = 0; i < 1000; ++i) {
    const D a = -std::exp(rng.uniform(-5, 3)), dt = std::exp(rng.uniform(-8, 2));
    const auto z = discretize(a, rng.uniform(-1, 1), dt);
    stable = stable && z.a_bar > 0 && z.a_bar < 1;
  }
  rep.expect("zoh", "a_bar in (0,1) for A<0, dt>0", stable);

  bool rejected = false;
  try {
    discretize(-1, 1, 0);
  } catch (const std::invalid_argument&) {
    rejected = true;
  }
  rep.expect("zoh", "non-positive dt rejected", rejected);
  return rep;
}

Report causality_suite(std::uint64_t seed) {
  Report rep;
  Rng rng(seed);
  NoGradGuard guard;
  for (bool residual : {false, true}) {
    MambaConfig mc;
    mc.d_model = 8;
    mc.d_state = 4;
    mc.residual_norm = residual;
    const auto block = MambaBlock<D>::init(mc, rng);
    const std::size_t L = 16, B = 2;
    const TD x = rand_t({B, L, mc.d_model}, rng, -1, 1, false);
    const auto y = block(x);
    std::size_t violations = 0, responsive = 0;
    for (std::size_t k = 0; k < L; ++k) {
      std::vector<D> v(x.values().begin(), x.values().end());
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < mc.d_model; ++c) v[(b * L + k) * mc.d_model + c] += rng.uniform(0.5, 1.5);
      }
      const auto yp = block(TD(x.shape(), std::move(v)));
      bool changed_at_k = false;
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < L; ++t) {
          for (std::size_t c = 0; c < mc.d_model; ++c) {
            const std::size_t i = (b * L + t) * mc.d_model + c;
            if (t < k && yp[i] != y[i]) ++violations;
            if (t == k && yp[i] != y[i]) changed_at_k = true;
          }
        }
      }
      responsive += changed_at_k;
    }
    const std::string tag = residual ? " (residual+norm)" : "";
    rep.bound("causality", "outputs before a perturbed step" + tag, double(violations), 0.0, "exact f64 comparison");
    rep.expect("causality", "perturbed step reaches its own output" + tag, responsive == L);
  }
  return rep;
}

namespace {

using boost::multiprecision::cpp_rational;

}  // namespace

Report metrics_suite(std::size_t pairs, std::uint64_t seed) {
  Report rep;
  Rng rng(seed);
  std::size_t count_mismatch = 0, ratio_mismatch = 0, identity_bad = 0, merge_bad = 0;
  double mean_err = 0;
  for (std::size_t p = 0; p < pairs; ++p) {
    const std::size_t K = rng.uniform_int(2, 20), n = rng.uniform_int(1, 400);
    std::vector<std::uint16_t> labels(n), preds(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<std::uint16_t>(rng.uniform_int(0, K - 1));
      // bias toward correct predictions so matrices are not uniform noise
      preds[i] = rng.uniform(0, 1) < 0.6 ? labels[i] : static_cast<std::uint16_t>(rng.uniform_int(0, K - 1));
    }
    std::set<std::size_t> ignore, eval;
    if (rng.uniform(0, 1) < 0.5) ignore.insert(rng.uniform_int(0, K - 1));
    for (std::size_t k = 0; k < K; ++k) {
      if (rng.uniform(0, 1) < 0.7) eval.insert(k);
    }
    if (eval.empty()) eval.insert(0);

    ConfusionMatrix cm(K, eval);
    cm.accumulate(labels, preds, ignore);

    // brute force: one pass over the pixels per (true, predicted) cell
    std::vector<std::uint64_t> ref(K * K, 0);
    for (std::size_t t = 0; t < K; ++t) {
      for (std::size_t q = 0; q < K; ++q) {
        for (std::size_t i = 0; i < n; ++i) {
          if (!ignore.count(labels[i]) && labels[i] == t && preds[i] == q) ++ref[t * K + q];
        }
      }
    }
    std::uint64_t total = 0, trace = 0;
    for (std::size_t t = 0; t < K; ++t) {
      for (std::size_t q = 0; q < K; ++q) {
        if (cm.at(t, q) != ref[t * K + q]) ++count_mismatch;
        total += ref[t * K + q];
      }
      trace += ref[t * K + t];
    }
    if (total == 0) continue;
    const auto s = cm.scores();
    // per-class ratios: a single IEEE division of exact integers is the
    // correctly rounded rational, so equality is exact
    if (s.oa != double(trace) / double(total)) ++ratio_mismatch;
    cpp_rational miou = 0, mf1 = 0;
    std::size_t present = 0;
    for (std::size_t k = 0; k < K; ++k) {
      std::uint64_t tp = ref[k * K + k], row = 0, col = 0;
      for (std::size_t j = 0; j < K; ++j) {
        row += ref[k * K + j];
        col += ref[j * K + k];
      }
      const std::uint64_t fp = col - tp, fn = row - tp;
      const bool is_present = tp + fp + fn > 0;
      if (bool(s.present[k]) != is_present) ++ratio_mismatch;
      if (!is_present) continue;
      if (s.iou[k] != double(tp) / double(tp + fp + fn)) ++ratio_mismatch;
      if (s.f1[k] != double(2 * tp) / double(2 * tp + fp + fn)) ++ratio_mismatch;
      if (std::abs(s.f1[k] - 2 * s.iou[k] / (1 + s.iou[k])) > 1e-15 || s.iou[k] > s.f1[k]) ++identity_bad;
      if (eval.count(k)) {
        miou += cpp_rational(tp, tp + fp + fn);
        mf1 += cpp_rational(2 * tp, 2 * tp + fp + fn);
        ++present;
      }
    }
    if (present) {
      miou /= present;
      mf1 /= present;
      mean_err = std::max({mean_err, std::abs(s.miou - miou.convert_to<double>()),
                           std::abs(s.mf1 - mf1.convert_to<double>())});
    }

    // shards merged equal the whole
    const std::size_t cut = rng.uniform_int(0, n);
    ConfusionMatrix a(K, eval), b(K, eval);
    a.accumulate(std::span(labels).first(cut), std::span(preds).first(cut), ignore);
    b.accumulate(std::span(labels).subspan(cut), std::span(preds).subspan(cut), ignore);
    a.merge(b);
    if (a.counts() != cm.counts()) ++merge_bad;
  }
  const std::string np = std::to_string(pairs) + " random pairs";
  rep.bound("metrics", "counts vs brute force", double(count_mismatch), 0.0, np);
  rep.bound("metrics", "OA/IoU/F1 vs exact ratios", double(ratio_mismatch), 0.0, np);
  rep.bound("metrics", "mIoU/mF1 vs exact rational mean", mean_err, 1e-15, np);
  rep.bound("metrics", "F1 = 2IoU/(1+IoU), IoU <= F1", double(identity_bad), 0.0);
  rep.bound("metrics", "merge of shards equals whole", double(merge_bad), 0.0);

  {
    ConfusionMatrix cm(2);
    cm.add(0, 0, 2);
    cm.add(0, 1, 1);
    cm.add(1, 1, 3);
    const auto s = cm.scores();
    rep.bound("metrics", "hand cm OA = 5/6", std::abs(s.oa - 5.0 / 6.0), 1e-6);
    rep.bound("metrics", "hand cm IoU = [2/3, 3/4]",
              std::max(std::abs(s.iou[0] - 2.0 / 3.0), std::abs(s.iou[1] - 0.75)), 1e-6);
    rep.bound("metrics", "hand cm F1 = [0.8, 6/7]", std::max(std::abs(s.f1[0] - 0.8), std::abs(s.f1[1] - 6.0 / 7.0)),
              1e-6);
    rep.bound("metrics", "hand cm mIoU = 0.7083", std::abs(s.miou - 0.7083333333), 1e-6);
    rep.bound("metrics", "hand cm mF1 = 0.8286", std::abs(s.mf1 - 0.8285714286), 1e-6);
  }
  {
    ConfusionMatrix cm(2);
    const std::vector<std::uint16_t> l{0, 0, 1}, q{0, 1, 1};
    cm.accumulate(l, q);
    rep.expect("metrics", "labels [0,0,1] preds [0,1,1]",
               cm.at(0, 0) == 1 && cm.at(0, 1) == 1 && cm.at(1, 0) == 0 && cm.at(1, 1) == 1);
  }
  {
    // class 2 never true and never predicted
    ConfusionMatrix with(3), without(2);
    with.add(0, 0, 2);
    with.add(0, 1, 1);
    with.add(1, 1, 3);
    without.add(0, 0, 2);
    without.add(0, 1, 1);
    without.add(1, 1, 3);
    const auto a = with.scores(), b = without.scores();
    rep.expect("metrics", "absent class excluded from means",
               !a.present[2] && a.miou == b.miou && a.mf1 == b.mf1 && a.averaged_classes == 2);
  }
  return rep;
}

Report loss_suite(std::uint64_t seed) {
  Report rep;
  {
    const auto w = positional_weights(4);
    rep.expect("loss", "PW(4) = [0.25,0.5,0.75,1.0] exactly",
               w == std::vector<double>{0.25, 0.5, 0.75, 1.0});
    double e = 0;
    for (std::size_t L = 1; L <= 64; ++L) {
      const auto v = positional_weights(L);
      double s = 0;
      for (auto x : v) s += x;
      e = std::max(e, std::abs(s - (L + 1) / 2.0));
    }
    rep.bound("loss", "sum PW(L) = (L+1)/2, L<=64", e, 1e-12);
  }
  {
    NoGradGuard guard;
    const TD x = TD::zeros({1, 2, 1, 1, 1}), xh = TD::full({1, 2, 1, 1, 1}, 1.0);
    rep.bound("loss", "recon hand case with PW = 1.5", std::abs(reconstruction_loss(x, xh, {2}, true).item() - 1.5),
              1e-12);
    rep.bound("loss", "recon hand case without PW = 2.0",
              std::abs(reconstruction_loss(x, xh, {2}, false).item() - 2.0), 1e-12);
    rep.bound("loss", "identical reconstruction = 0", std::abs(reconstruction_loss(xh, xh, {2}, true).item()), 0.0);
    const TD logits = TD::zeros({1, 2, 1, 3});
    rep.bound("loss", "uniform logits K=2 = ln 2",
              std::abs(classification_loss(logits, {0, 1, 1}, {}).item() - std::numbers::ln2), 1e-12);
  }
  {
    NoGradGuard guard;
    LossConfig cfg;
    LossReport r;
    combined_loss(TD::scalar(0.8), TD::scalar(0.4), cfg, &r);
    rep.bound("loss", "l_cls .8 l_tp .4 -> w1 2, total .824",
              std::max(std::abs(r.w1 - 2.0), std::abs(r.total - 0.824)), 1e-12);
    cfg.use_w1 = false;
    combined_loss(TD::scalar(1.0), TD::scalar(10.0), cfg, &r);
    rep.bound("loss", "w1 off, l_cls 1 l_tp 10 -> 1.3", std::abs(r.total - 1.3), 1e-12);
    cfg.use_w1 = true;
    cfg.w0 = 0;
    const auto t = combined_loss(TD::scalar(0.7), TD::scalar(0.2), cfg, &r);
    rep.bound("loss", "w0 = 0 -> total = l_cls", std::abs(t.item() - 0.7), 0.0);
  }

  // end to end on a small model: value identity and the gradient that
  // reaches the reconstruction branch only because w1 is held constant
  {
    ModelConfig mc;
    mc.input_channels = 3;
    mc.num_classes = 4;
    mc.hidden = 8;
    mc.mamba.d_state = 4;
    auto model = SitsMamba<D>::init(mc, seed);
    Rng rng(seed);
    const TD x = rand_t({2, 5, 3, 4, 4}, rng, 0, 1, false);
    std::vector<std::uint16_t> labels(2 * 16);
    for (auto& l : labels) l = static_cast<std::uint16_t>(rng.uniform_int(0, 3));
    const std::vector<std::size_t> valid{5, 4};

    double rel = 0, gnorm = 0;
    {
      Tape<D>::local().clear();
      auto out = model.forward(x, valid, true, true);
      const auto l_cls = classification_loss(out.class_logits, labels, {});
      const auto l_tp = reconstruction_loss(x, out.reconstruction, valid, true);
      LossReport r;
      const auto total = combined_loss(l_cls, l_tp, mc.loss, &r);
      const double expect = (1 + mc.loss.w0) * l_cls.item();
      rel = std::abs(total.item() - expect) / expect;
      backward(total);
      for (auto g : model.rbranch.weight.grad()) gnorm += g * g;
      gnorm = std::sqrt(gnorm);
      for (auto& p : model.parameters()) p.tensor->zero_grad();
    }
    rep.bound("loss", "total = (1+w0) l_cls (f64, small model)", rel, 1e-12);
    rep.expect("loss", "rbranch weight gradient nonzero", gnorm > 0, "|g| = " + std::to_string(gnorm));
  }
  return rep;
}

Report run_all() {
  Report r;
  r.merge(gradient_suite());
  r.merge(scan_kernel_suite());
  r.merge(zoh_suite());
  r.merge(causality_suite());
  r.merge(metrics_suite());
  r.merge(loss_suite());
  return r;
}

}  // namespace sitsmamba::verify
