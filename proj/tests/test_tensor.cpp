#include <doctest.h>

#include "helpers.hpp"
#include "sitsmamba/ops.hpp"

using namespace sitsmamba;
using namespace testing;

TEST_SUITE("tensor") {

TEST_CASE("element count and grad shape follow the shape") {
  TD t({2, 3, 4}, std::vector<double>(24, 1.0), true);
  CHECK(t.numel() == 24);
  CHECK(t.rank() == 3);
  CHECK_THROWS_AS(TD({2, 3}, std::vector<double>(5)), ShapeError);
  backward(sum(t));
  CHECK(t.grad().size() == 24);
}

TEST_CASE("grad of sum is all ones, any shape") {
  for (Shape s : {Shape{1}, Shape{5}, Shape{2, 3}, Shape{2, 1, 4}}) {
    TD x = TD::full(s, 0.3, true);
    backward(sum(x));
    for (double g : grads(x)) CHECK(g == 1.0);
  }
}

TEST_CASE("sum(x^2) at [1,2] has grad [2,4]") {
  TD x({2}, {1.0, 2.0}, true);
  backward(sum(mul(x, x)));
  CHECK(grads(x) == std::vector<double>{2.0, 4.0});
}

TEST_CASE("backward rejects non-scalars and a consumed tape") {
  TD x({3}, {1.0, 2.0, 3.0}, true);
  auto y = mul(x, x);
  CHECK_THROWS_AS(backward(y), AutodiffError);
  Tape<double>::local().clear();
  auto l = sum(mul(x, x));
  backward(l);
  CHECK_THROWS_AS(backward(l), AutodiffError);
}

TEST_CASE("gradients accumulate across uses of one tensor") {
  TD x({1}, {3.0}, true);
  backward(sum(add(mul(x, x), x)));  // 2x + 1
  CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("no recording under NoGradGuard") {
  TD x({2}, {1.0, 2.0}, true);
  {
    NoGradGuard g;
    auto y = sum(mul(x, x));
    CHECK(Tape<double>::local().size() == 0);
    CHECK_THROWS_AS(backward(y), AutodiffError);
  }
}

TEST_CASE("values_mut only on leaves") {
  TD x({2}, {1.0, 2.0}, true);
  auto y = add(x, x);
  CHECK_NOTHROW(x.values_mut());
  CHECK_THROWS_AS(y.values_mut(), AutodiffError);
  Tape<double>::local().clear();
}

TEST_CASE("detach cuts the tape") {
  TD x({2}, {1.0, 2.0}, true);
  auto y = mul(x, x).detach();
  CHECK_FALSE(y.requires_grad());
  Tape<double>::local().clear();
}

}  // TEST_SUITE
