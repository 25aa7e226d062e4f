#include <doctest.h>

#include <numbers>

#include "helpers.hpp"
#include "sitsmamba/ops.hpp"

using namespace sitsmamba;
using namespace testing;

TEST_SUITE("ops") {

TEST_CASE("closed-form values") {
  NoGradGuard g;
  CHECK(silu(TD::zeros({1})).item() == 0.0);
  CHECK(softplus(TD::zeros({1})).item() == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  CHECK(sigmoid(TD::zeros({1})).item() == doctest::Approx(0.5));
  CHECK(relu(TD({3}, {-1.0, 0.0, 2.0}))[2] == 2.0);
  CHECK(relu(TD({3}, {-1.0, 0.0, 2.0}))[0] == 0.0);
  // large arguments stay finite
  CHECK(softplus(TD({1}, {500.0})).item() == doctest::Approx(500.0));
  CHECK(sigmoid(TD({1}, {-800.0})).item() >= 0.0);
  CHECK(silu(TF({1}, {-100.f})).item() <= 0.f);
}

TEST_CASE("max over a time-constant axis is that constant") {
  NoGradGuard g;
  for (std::size_t len : {1u, 2u, 7u}) {
    std::vector<double> v;
    for (std::size_t t = 0; t < len; ++t) v.insert(v.end(), {1.5, -2.0, 0.25});
    const auto m = max_over_axis(TD({len, 3}, v), 0);
    CHECK(vals(m) == std::vector<double>{1.5, -2.0, 0.25});
  }
}

TEST_CASE("max over [1,3,2] is 3 and ties go to the lowest index") {
  TD x({3, 1}, {1.0, 3.0, 2.0}, true);
  backward(sum(max_over_axis(x, 0)));
  CHECK(grads(x) == std::vector<double>{0, 1, 0});
  TD t({3, 1}, {2.0, 2.0, 1.0}, true);
  backward(sum(max_over_axis(t, 0)));
  CHECK(grads(t) == std::vector<double>{1, 0, 0});
}

TEST_CASE("masked max ignores invalid steps") {
  NoGradGuard g;
  const std::vector<std::uint8_t> valid{1, 0, 1};
  const auto m = masked_max_over_axis(TD({1, 3, 1}, {1.0, 9.0, 2.0}), 1, valid);
  CHECK(m.item() == 2.0);
  const std::vector<std::uint8_t> none{0, 0, 0};
  CHECK_THROWS(masked_max_over_axis(TD({1, 3, 1}, {1.0, 9.0, 2.0}), 1, none));
}

TEST_CASE("reshape and transpose round trips are the identity on values and gradients") {
  Rng rng(3);
  TD x = random({2, 3, 4}, rng, -1, 1, true);
  const TD w = random({2, 3, 4}, rng);
  auto y = transpose(reshape(transpose(reshape(x, {6, 4}), 0, 1), {4, 6}), 0, 1);
  y = reshape(y, {2, 3, 4});
  CHECK(vals(y) == vals(x));
  backward(sum(mul(y, w)));
  CHECK(grads(x) == vals(w));
  TD p = random({2, 3, 4}, rng, -1, 1, true);
  auto q = permute(permute(p, {2, 0, 1}), {1, 2, 0});
  CHECK(vals(q) == vals(p));
  Tape<double>::local().clear();
}

TEST_CASE("slice and concat invert each other") {
  NoGradGuard g;
  Rng rng(4);
  const TD x = random({2, 5, 3}, rng);
  const auto parts = std::vector<TD>{slice(x, 1, 0, 2), slice(x, 1, 2, 3)};
  CHECK(vals(concat(parts, 1)) == vals(x));
  CHECK_THROWS_AS(slice(x, 1, 4, 2), ShapeError);
}

TEST_CASE("batchnorm in inference mode with unit statistics is the identity") {
  NoGradGuard g;
  Rng rng(5);
  const TD x = random({3, 4, 2, 2}, rng);
  TD rm = TD::zeros({4}), rv = TD::full({4}, 1.0);
  const auto y = batchnorm(x, TD::full({4}, 1.0), TD::zeros({4}), rm, rv, false, 0.1, 0.0);
  CHECK(max_abs_diff(vals(y), vals(x)) == 0.0);
}

TEST_CASE("batchnorm training normalizes per channel and updates running stats") {
  NoGradGuard g;
  Rng rng(6);
  const TD x = random({4, 2, 3, 3}, rng, 0, 5);
  TD rm = TD::zeros({2}), rv = TD::full({2}, 1.0);
  const auto y = batchnorm(x, TD::full({2}, 1.0), TD::zeros({2}), rm, rv, true);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0, s2 = 0, xs = 0;
    for (std::size_t n = 0; n < 4; ++n) {
      for (std::size_t i = 0; i < 9; ++i) {
        const double v = y[(n * 2 + c) * 9 + i];
        s += v;
        s2 += v * v;
        xs += x[(n * 2 + c) * 9 + i];
      }
    }
    CHECK(s / 36 == doctest::Approx(0).epsilon(1e-12).scale(1));
    CHECK(s2 / 36 == doctest::Approx(1).epsilon(1e-3));
    CHECK(rm[c] == doctest::Approx(0.1 * xs / 36));
  }
}

TEST_CASE("shape errors") {
  NoGradGuard g;
  CHECK_THROWS_AS(add(TD::zeros({2, 3}), TD::zeros({4})), ShapeError);
  CHECK_THROWS_AS(matmul(TD::zeros({2, 3}), TD::zeros({4, 2})), ShapeError);
  CHECK_THROWS_AS(conv2d(TD::zeros({1, 2, 4, 4}), TD::zeros({3, 3, 3, 3}), TD{}), ShapeError);
  CHECK_THROWS_AS(reshape(TD::zeros({2, 3}), {5}), ShapeError);
}

TEST_CASE("non-finite results are errors") {
  NoGradGuard g;
  CHECK_THROWS_AS(log(TD({1}, {-1.0})), NumericError);
  CHECK_THROWS_AS(exp(TF({1}, {1000.f})), NumericError);
}

TEST_CASE("conv2d keeps the spatial extent") {
  NoGradGuard g;
  Rng rng(7);
  for (std::size_t s : {3u, 8u, 16u}) {
    const auto y = conv2d(random({2, 3, s, s}, rng), random({5, 3, 3, 3}, rng), random({5}, rng));
    CHECK(y.shape() == Shape{2, 5, s, s});
  }
}

TEST_CASE("conv2d is cross-correlation with zero padding") {
  NoGradGuard g;
  // single 3x3 input, kernel picks the right neighbour
  std::vector<double> k(9, 0.0);
  k[5] = 1.0;  // (row 1, col 2)
  const TD x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const auto y = conv2d(x, TD({1, 1, 3, 3}, k), TD{});
  CHECK(vals(y) == std::vector<double>{2, 3, 0, 5, 6, 0, 8, 9, 0});
}

TEST_CASE("depthwise conv1d is causal") {
  NoGradGuard g;
  Rng rng(8);
  const TD w = random({2, 4}, rng), b = random({2}, rng);
  TD x = random({1, 6, 2}, rng);
  const auto y = depthwise_conv1d(x, w, b);
  auto v = vals(x);
  v[4 * 2] += 1.0;  // t = 4, channel 0
  const auto y2 = depthwise_conv1d(TD({1, 6, 2}, v), w, b);
  for (std::size_t t = 0; t < 4; ++t) CHECK(y2[t * 2] == y[t * 2]);
  CHECK(y2[4 * 2] != y[4 * 2]);
  // tap order: last weight multiplies the current step
  const auto impulse = depthwise_conv1d(TD({1, 4, 1}, {1, 0, 0, 0}), TD({1, 4}, {1, 2, 3, 4}), TD{});
  CHECK(vals(impulse) == std::vector<double>{4, 3, 2, 1});
}

TEST_CASE("softmax rows sum to one and log_softmax matches log of softmax") {
  NoGradGuard g;
  Rng rng(9);
  const TD x = random({2, 5, 3}, rng, -3, 3);
  const auto s = softmax(x, 1), ls = log_softmax(x, 1);
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t j = 0; j < 3; ++j) {
      double tot = 0;
      for (std::size_t k = 0; k < 5; ++k) {
        const std::size_t i = (n * 5 + k) * 3 + j;
        tot += s[i];
        CHECK(ls[i] == doctest::Approx(std::log(s[i])).epsilon(1e-12));
      }
      CHECK(tot == doctest::Approx(1.0).epsilon(1e-14));
    }
  }
}

TEST_CASE("float and double agree") {
  Rng rng(10);
  const auto xd = random({4, 8}, rng, -3, 3);
  const TF xf({4, 8}, std::vector<float>(xd.values().begin(), xd.values().end()));
  NoGradGuard g;
  CHECK(max_abs_diff(vals(silu(xf)), vals(silu(xd))) < 1e-6);
  CHECK(max_abs_diff(vals(softplus(xf)), vals(softplus(xd))) < 1e-6);
  CHECK(max_abs_diff(vals(sigmoid(xf)), vals(sigmoid(xd))) < 1e-6);
  CHECK(max_abs_diff(vals(exp(xf)), vals(exp(xd))) < 1e-5);
}

}  // TEST_SUITE
