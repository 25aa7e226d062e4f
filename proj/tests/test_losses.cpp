#include <doctest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "sitsmamba/losses.hpp"
#include "sitsmamba/ops.hpp"
#include "sitsmamba/verify.hpp"

using namespace sitsmamba;
using namespace testing;

namespace {

double scalar(const TD& t) { return t[0]; }

// target zero, prediction with one unit error per listed (sample, step)
double recon_with_errors(std::size_t n, std::size_t t, std::vector<std::pair<std::size_t, std::size_t>> at,
                         std::vector<std::size_t> valid, bool pw) {
  std::vector<double> xh(n * t, 0.0);
  for (auto [i, s] : at) xh[i * t + s] = 1.0;
  NoGradGuard g;
  return scalar(reconstruction_loss(TD::zeros({n, t, 1, 1, 1}), TD({n, t, 1, 1, 1}, xh), valid, pw));
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("positional weights") {
  CHECK(positional_weights(4) == std::vector<double>{0.25, 0.5, 0.75, 1.0});
  CHECK(positional_weights(1) == std::vector<double>{1.0});
  for (std::size_t L : {2u, 7u, 30u, 61u}) {
    const auto w = positional_weights(L);
    CHECK(std::accumulate(w.begin(), w.end(), 0.0) == doctest::Approx((L + 1) / 2.0).epsilon(1e-14));
  }
  CHECK_THROWS_AS(positional_weights(0), std::invalid_argument);
}

TEST_CASE("reconstruction loss hand cases") {
  CHECK(recon_with_errors(1, 2, {{0, 0}, {0, 1}}, {2}, true) == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(recon_with_errors(1, 2, {{0, 0}, {0, 1}}, {2}, false) == doctest::Approx(2.0).epsilon(1e-15));
  Rng rng(1);
  const auto x = random({2, 3, 2, 2, 2}, rng);
  NoGradGuard g;
  CHECK(scalar(reconstruction_loss(x, x, {3, 3}, true)) == 0.0);
}

TEST_CASE("later errors weigh more under positional weights") {
  for (std::size_t t = 0; t + 1 < 6; ++t) CHECK(recon_with_errors(1, 6, {{0, t}}, {6}, true) <
                                                recon_with_errors(1, 6, {{0, t + 1}}, {6}, true));
  CHECK(recon_with_errors(1, 6, {{0, 1}}, {6}, false) == recon_with_errors(1, 6, {{0, 4}}, {6}, false));
}

TEST_CASE("padded steps do not count and weights follow each sample's own length") {
  // sample 1 has 2 valid steps of 4; its weights are 1/2 and 1
  const double a = recon_with_errors(2, 4, {{0, 3}, {1, 1}, {1, 3}}, {4, 2}, true);
  CHECK(a == doctest::Approx((1.0 + 1.0) / 2).epsilon(1e-15));
  CHECK_THROWS(recon_with_errors(1, 3, {}, {0}, true));
}

TEST_CASE("reconstruction loss rejects mismatched shapes") {
  NoGradGuard g;
  CHECK_THROWS_AS(reconstruction_loss(TD::zeros({1, 2, 1, 1, 1}), TD::zeros({1, 3, 1, 1, 1}), {2}, true),
                  ShapeError);
}

TEST_CASE("classification loss closed forms") {
  NoGradGuard g;
  CHECK(scalar(classification_loss(TD::zeros({1, 2, 2, 2}), {0, 1, 1, 0}, {})) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
  const TD sharp({1, 2, 1, 2}, {60.0, -60.0, -60.0, 60.0});
  CHECK(scalar(classification_loss(sharp, {0, 1}, {})) < 1e-40);
  // only pixel 1 scored: p(true) from softmax([0.3, -0.4, 1.1]) at class 2
  const TD l({1, 3, 1, 2}, {5.0, 0.3, 1.0, -0.4, 0.0, 1.1});
  const double p = std::exp(1.1) / (std::exp(0.3) + std::exp(-0.4) + std::exp(1.1));
  CHECK(scalar(classification_loss(l, {7, 2}, {7})) == doctest::Approx(-std::log(p)).epsilon(1e-14));
  CHECK_THROWS(classification_loss(l, {7, 7}, {7}));
}

TEST_CASE("both losses are invariant to a pixel permutation") {
  Rng rng(2);
  const std::size_t P = 12;
  const auto logits = random({1, 4, 3, 4}, rng, -2, 2);
  std::vector<std::uint16_t> lab(P);
  for (auto& v : lab) v = std::uint16_t(rng.uniform_int(0, 3));
  const auto x = random({1, 2, 1, 3, 4}, rng), xh = random({1, 2, 1, 3, 4}, rng);
  std::vector<std::size_t> perm(P);
  std::iota(perm.begin(), perm.end(), 0);

  for (std::size_t i = P - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
  auto permute = [&](const TD& t, std::size_t planes) {
    std::vector<double> v(t.numel());
    for (std::size_t c = 0; c < planes; ++c)
      for (std::size_t p = 0; p < P; ++p) v[c * P + p] = t[c * P + perm[p]];
    return TD(t.shape(), v);
  };
  std::vector<std::uint16_t> lab_p(P);
  for (std::size_t p = 0; p < P; ++p) lab_p[p] = lab[perm[p]];
  NoGradGuard g;
  CHECK(scalar(classification_loss(permute(logits, 4), lab_p, {})) ==
        doctest::Approx(scalar(classification_loss(logits, lab, {}))).epsilon(1e-14));
  CHECK(scalar(reconstruction_loss(permute(x, 2), permute(xh, 2), {2}, true)) ==
        doctest::Approx(scalar(reconstruction_loss(x, xh, {2}, true))).epsilon(1e-14));
}

TEST_CASE("combined loss arithmetic") {
  NoGradGuard g;
  LossConfig c;
  LossReport r;
  const double total = scalar(combined_loss(TD::scalar(0.8), TD::scalar(0.4), c, &r));
  CHECK(r.w1 == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(total == doctest::Approx(0.8 + 0.03 * 2 * 0.4).epsilon(1e-15));
  CHECK(total == doctest::Approx(0.824).epsilon(1e-15));
  CHECK(total == doctest::Approx(0.8 * 1.03).epsilon(1e-15));

  c.w0 = 0;
  CHECK(scalar(combined_loss(TD::scalar(0.8), TD::scalar(0.4), c)) == 0.8);
  c.w0 = 0.03;
  c.use_w1 = false;
  CHECK(scalar(combined_loss(TD::scalar(1.0), TD::scalar(10.0), c)) == doctest::Approx(1.3).epsilon(1e-15));
  CHECK(scalar(combined_loss(TD::scalar(1.0), TD{}, c)) == 1.0);
}

TEST_CASE("combined loss gradient treats w1 as a constant") {
  LossConfig c;
  auto lc = TD::scalar(0.8, true), lt = TD::scalar(0.4, true);
  auto total = combined_loss(lc, lt, c);
  backward(total);
  CHECK(lc.grad()[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(lt.grad()[0] == doctest::Approx(0.03 * 2.0).epsilon(1e-15));
}

TEST_CASE("zero reconstruction loss is clamped and logged") {
  std::vector<std::string> seen;
  set_loss_log([&seen](const std::string& m) { seen.push_back(m); });
  NoGradGuard g;
  LossReport r;
  const double total = scalar(combined_loss(TD::scalar(0.5), TD::scalar(0.0), LossConfig{}, &r));
  set_loss_log({});
  CHECK(std::isfinite(total));
  CHECK(r.w1 == doctest::Approx(0.5 / kW1Epsilon));
  CHECK(seen.size() == 1);
}

TEST_CASE("loss oracle suite") {
  const auto r = verify::loss_suite(21);
  CHECK(r.passed());
}

}  // TEST_SUITE
