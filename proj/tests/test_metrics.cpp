#include <doctest.h>

#include <sstream>

#include "sitsmamba/metrics.hpp"
#include "sitsmamba/rng.hpp"
#include "sitsmamba/verify.hpp"

using namespace sitsmamba;

TEST_SUITE("metrics") {

TEST_CASE("hand counted confusion matrix") {
  ConfusionMatrix cm(2);
  const std::vector<std::uint16_t> labels{0, 0, 1}, preds{0, 1, 1};
  cm.accumulate(labels, preds);
  CHECK(cm.counts() == std::vector<std::uint64_t>{1, 1, 0, 1});
  ConfusionMatrix empty(3);
  empty.accumulate(std::vector<std::uint16_t>{}, std::vector<std::uint16_t>{});
  CHECK(empty.total() == 0);
  CHECK_THROWS(empty.scores());
}

TEST_CASE("two-class hand case") {
  ConfusionMatrix cm(2);
  cm.add(0, 0, 2);
  cm.add(0, 1, 1);
  cm.add(1, 1, 3);
  const auto s = cm.scores();
  CHECK(s.oa == doctest::Approx(5.0 / 6).epsilon(1e-15));
  CHECK(s.iou[0] == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(s.iou[1] == doctest::Approx(3.0 / 4).epsilon(1e-15));
  CHECK(s.f1[0] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(s.f1[1] == doctest::Approx(6.0 / 7).epsilon(1e-15));
  CHECK(std::abs(s.miou - 0.7083) < 1e-4);
  CHECK(std::abs(s.mf1 - 0.8286) < 1e-4);
  CHECK(s.mf1 == doctest::Approx((0.8 + 6.0 / 7) / 2).epsilon(1e-15));
}

TEST_CASE("diagonal matrix scores one everywhere") {
  ConfusionMatrix cm(4);
  for (std::size_t k = 0; k < 4; ++k) cm.add(k, k, k + 1);
  const auto s = cm.scores();
  CHECK(s.oa == 1.0);
  for (std::size_t k = 0; k < 4; ++k) CHECK((s.iou[k] == 1.0 && s.f1[k] == 1.0));
}

TEST_CASE("absent classes leave the means unchanged") {
  ConfusionMatrix two(2), three(3);
  for (auto* cm : {&two, &three}) {
    cm->add(0, 0, 2);
    cm->add(0, 1, 1);
    cm->add(1, 1, 3);
  }
  const auto a = two.scores(), b = three.scores();
  CHECK_FALSE(b.present[2]);
  CHECK(b.averaged_classes == 2);
  CHECK(a.miou == b.miou);
  CHECK(a.mf1 == b.mf1);
}

TEST_CASE("eval classes restrict the means but not OA; ignored labels leave OA") {
  ConfusionMatrix cm(3, {1, 2});
  const std::vector<std::uint16_t> labels{0, 0, 1, 2, 2, 1}, preds{1, 0, 1, 2, 1, 1};
  cm.accumulate(labels, preds);
  const auto s = cm.scores();
  CHECK(s.oa == doctest::Approx(4.0 / 6));
  CHECK(s.averaged_classes == 2);
  CHECK(s.mf1 == doctest::Approx((s.f1[1] + s.f1[2]) / 2).epsilon(1e-15));
  ConfusionMatrix ig(3);
  ig.accumulate(labels, preds, {0});
  CHECK(ig.total() == 4);
}

TEST_CASE("IoU <= F1 = 2 IoU / (1 + IoU)") {
  Rng rng(3);
  ConfusionMatrix cm(5);
  for (int i = 0; i < 400; ++i) cm.add(rng.uniform_int(0, 4), rng.uniform_int(0, 4));
  const auto s = cm.scores();
  for (std::size_t k = 0; k < 5; ++k) {
    CHECK(s.iou[k] <= s.f1[k]);
    CHECK(s.f1[k] <= 1.0);
    CHECK(s.f1[k] == doctest::Approx(2 * s.iou[k] / (1 + s.iou[k])).epsilon(1e-14));
  }
}

TEST_CASE("merging shards equals scoring the concatenation") {
  Rng rng(4);
  std::vector<std::uint16_t> l(300), p(300);
  for (std::size_t i = 0; i < 300; ++i) {
    l[i] = std::uint16_t(rng.uniform_int(0, 5));
    p[i] = std::uint16_t(rng.uniform_int(0, 5));
  }
  ConfusionMatrix whole(6), a(6), b(6);
  whole.accumulate(l, p);
  a.accumulate(std::span(l).first(120), std::span(p).first(120));
  b.accumulate(std::span(l).subspan(120), std::span(p).subspan(120));
  b.merge(a);
  CHECK(b.counts() == whole.counts());
  CHECK(b.scores().mf1 == whole.scores().mf1);
}

TEST_CASE("report formats") {
  ConfusionMatrix cm(2);
  cm.add(0, 0, 2);
  cm.add(1, 1, 1);
  cm.add(1, 0, 1);
  std::ostringstream csv, table;
  write_scores_csv(csv, cm.scores());
  print_scores(table, cm.scores());
  CHECK(csv.str().find("mF1") != std::string::npos);
  CHECK(table.str().find("OA") != std::string::npos);
}

TEST_CASE("brute force oracle suite") {
  const auto r = verify::metrics_suite(100, 17);
  CHECK(r.passed());
}

}  // TEST_SUITE
