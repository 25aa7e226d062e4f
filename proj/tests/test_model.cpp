#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>

#include "helpers.hpp"
#include "sitsmamba/checkpoint.hpp"
#include "sitsmamba/model.hpp"
#include "sitsmamba/ops.hpp"

using namespace sitsmamba;
using namespace testing;

namespace {

ModelConfig small_config(std::size_t c = 3, std::size_t k = 5) {
  ModelConfig mc;
  mc.input_channels = c;
  mc.num_classes = k;
  mc.hidden = 8;
  mc.mamba.d_state = 4;
  mc.validate();
  return mc;
}

SitsBatch random_batch(std::size_t n, std::size_t t, std::size_t c, std::size_t h, std::size_t w, Rng& rng,
                       std::size_t k = 5) {
  SitsBatch b;
  b.n = n, b.t = t, b.c = c, b.h = h, b.w = w;
  b.series.resize(n * t * c * h * w);
  for (auto& v : b.series) v = float(rng.uniform(0, 1));
  b.valid_length.assign(n, t);
  b.labels.resize(n * h * w);
  for (auto& l : b.labels) l = std::uint16_t(rng.uniform_int(0, k - 1));
  return b;
}

// one sample of a batch as its own batch
SitsBatch pick(const SitsBatch& b, std::size_t i) {
  SitsBatch o = b;
  o.n = 1;
  const std::size_t fs = b.t * b.c * b.h * b.w, ls = b.h * b.w;
  o.series.assign(b.series.begin() + i * fs, b.series.begin() + (i + 1) * fs);
  o.labels.assign(b.labels.begin() + i * ls, b.labels.begin() + (i + 1) * ls);
  o.valid_length = {b.valid_length[i]};
  return o;
}

}  // namespace

TEST_SUITE("spatial") {

TEST_CASE("conv block keeps H x W") {
  Rng rng(1);
  auto block = ConvBlock<float>::init(4, 16, rng);
  for (std::size_t s : {8u, 16u, 32u}) {
    NoGradGuard g;
    CHECK(block(random<float>({3, 4, s, s}, rng), true).shape() == Shape{3, 16, s, s});
    CHECK(block(random<float>({2, 4, s, s}, rng), false).shape() == Shape{2, 16, s, s});
  }
}

TEST_CASE("zero frames with zero BN shift give zero features") {
  Rng rng(2);
  auto block = ConvBlock<double>::init(3, 8, rng);
  NoGradGuard g;
  // the batch mean of a constant channel is exact only up to rounding
  for (double v : vals(block(TD::zeros({2, 3, 8, 8}), true))) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("features are non-negative") {
  Rng rng(3);
  auto block = ConvBlock<double>::init(3, 8, rng);
  NoGradGuard g;
  for (double v : vals(block(random({2, 3, 8, 8}, rng), true))) CHECK(v >= 0.0);
}

TEST_CASE("class head: extents, ReLU range and argmax in range") {
  Rng rng(4);
  for (std::size_t k : {2u, 18u, 20u}) {
    auto head = ClsHead<double>::init(8, k, rng);
    NoGradGuard g;
    const auto y = head(random({2, 8, 6, 6}, rng), true);
    CHECK(y.shape() == Shape{2, k, 6, 6});
    for (double v : vals(y)) CHECK(v >= 0.0);
    for (auto l : argmax_labels(y)) CHECK(l < k);
  }
}

TEST_CASE("conv block is translation equivariant away from the border") {
  Rng rng(5);
  auto block = ConvBlock<double>::init(2, 6, rng);
  const std::size_t S = 16, dy = 1, dx = 2;
  std::vector<double> a(2 * S * S, 0.0), b(2 * S * S, 0.0);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 5; i < 10; ++i)
      for (std::size_t j = 5; j < 10; ++j) {
        const double v = rng.uniform(-1, 1);
        a[(c * S + i) * S + j] = v;
        b[(c * S + i + dy) * S + j + dx] = v;
      }
  NoGradGuard g;
  const auto ya = block(TD({1, 2, S, S}, a), false), yb = block(TD({1, 2, S, S}, b), false);
  double worst = 0;
  for (std::size_t c = 0; c < 6; ++c)
    for (std::size_t i = 2; i + dy < S - 2; ++i)
      for (std::size_t j = 2; j + dx < S - 2; ++j)
        worst = std::max(worst, std::abs(ya[(c * S + i) * S + j] - yb[(c * S + i + dy) * S + j + dx]));
  CHECK(worst < 1e-12);
}

TEST_CASE("spatial parameter count follows the layer arithmetic") {
  Rng rng(6);
  auto block = ConvBlock<float>::init(10, 128, rng);
  ParamList<float> ps;
  block.collect("s", ps);
  // two biased 3x3 convs plus gamma/beta of two batchnorms
  CHECK(count_trainable(ps) == 10 * 128 * 9 + 128 + 128 * 128 * 9 + 128 + 4 * 128);
  CHECK(count_trainable(ps) == 159744);
}

}  // TEST_SUITE

TEST_SUITE("model") {

TEST_CASE("output shapes in both temporal modes") {
  for (auto mode : {TemporalMode::Pad, TemporalMode::Sample30}) {
    auto mc = small_config();
    mc.mode = mode;
    auto model = SitsMamba<float>::init(mc, 1);
    Rng rng(1);
    const std::size_t t = mode == TemporalMode::Pad ? 7 : kSampledLength;
    const auto batch = random_batch(2, t, 3, 5, 6, rng);
    NoGradGuard g;
    const auto out = model.forward(batch, true, true);
    CHECK(out.class_logits.shape() == Shape{2, 5, 5, 6});
    CHECK(out.reconstruction.shape() == Shape{2, t, 3, 5, 6});
    CHECK(out.encoded.shape() == Shape{2, 30, t, 8});
    CHECK_FALSE(model.forward(batch, false, false).reconstruction.defined());
  }
}

TEST_CASE("single time step") {
  auto model = SitsMamba<float>::init(small_config(), 2);
  Rng rng(2);
  NoGradGuard g;
  const auto out = model.forward(random_batch(1, 1, 3, 4, 4, rng), true, true);
  CHECK(out.class_logits.shape() == Shape{1, 5, 4, 4});
  CHECK(out.reconstruction.shape() == Shape{1, 1, 3, 4, 4});
}

TEST_CASE("wrong channel count is a shape error") {
  auto model = SitsMamba<float>::init(small_config(), 3);
  Rng rng(3);
  NoGradGuard g;
  CHECK_THROWS_AS(model.forward(random_batch(1, 4, 2, 4, 4, rng), false, false), ShapeError);
}

TEST_CASE("a pixel only influences logits within its receptive field") {
  auto model = SitsMamba<double>::init(small_config(), 4);
  Rng rng(4);
  auto batch = random_batch(1, 5, 3, 10, 10, rng);
  NoGradGuard g;
  const auto before = model.forward(batch, false, false).class_logits;
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t c = 0; c < 3; ++c) batch.series[(t * 3 + c) * 100] += 0.7f;  // pixel (0, 0)
  const auto after = model.forward(batch, false, false).class_logits;
  bool near_changed = false;
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t i = 0; i < 10; ++i)
      for (std::size_t j = 0; j < 10; ++j) {
        const std::size_t at = (k * 10 + i) * 10 + j;
        if (std::max(i, j) > 3) CHECK(before[at] == after[at]);
        else near_changed |= before[at] != after[at];
      }
  CHECK(near_changed);
}

TEST_CASE("prediction ties go to the lowest class") {
  const TD logits({1, 3, 1, 2}, {1.0, 0.0, 2.0, 2.0, 2.0, 2.0});
  CHECK(argmax_labels(logits) == std::vector<std::uint16_t>{1, 1});
  const TD flat({1, 4, 1, 1}, {0.5, 0.5, 0.5, 0.5});
  CHECK(argmax_labels(flat) == std::vector<std::uint16_t>{0});
}

TEST_CASE("prediction is deterministic and per sample") {
  auto model = SitsMamba<float>::init(small_config(), 5);
  Rng rng(5);
  const auto batch = random_batch(3, 6, 3, 5, 5, rng);
  const auto p = model.predict(batch);
  CHECK(model.predict(batch) == p);
  CHECK(p.size() == 3 * 25);
  // reversing the batch reverses the label maps
  SitsBatch rev = batch;
  const std::size_t fs = 6 * 3 * 25;
  for (std::size_t i = 0; i < 3; ++i)
    std::copy_n(batch.series.begin() + (2 - i) * fs, fs, rev.series.begin() + i * fs);
  const auto pr = model.predict(rev);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(std::equal(pr.begin() + i * 25, pr.begin() + (i + 1) * 25, p.begin() + (2 - i) * 25));
  // and each sample alone gives the same map
  for (std::size_t i = 0; i < 3; ++i) {
    const auto alone = model.predict(pick(batch, i));
    CHECK(std::equal(alone.begin(), alone.end(), p.begin() + i * 25));
  }
}

TEST_CASE("trailing padding does not change the prediction") {
  auto model = SitsMamba<double>::init(small_config(), 6);
  Rng rng(6);
  const auto shortb = random_batch(1, 5, 3, 4, 4, rng);
  SitsBatch padded = shortb;
  padded.t = 9;
  padded.series.resize(9 * 3 * 16, 0.0f);
  padded.valid_length = {5};
  NoGradGuard g;
  const auto a = model.forward(shortb, false, false).class_logits;
  const auto b = model.forward(padded, false, false).class_logits;
  CHECK(max_abs_diff(vals(a), vals(b)) < 1e-12);
}

TEST_CASE("reconstruction branch is absent from the inference path") {
  auto mc = small_config();
  auto model = SitsMamba<float>::init(mc, 7);
  Rng rng(7);
  const auto batch = random_batch(2, 6, 3, 5, 5, rng);
  const auto dir = std::filesystem::temp_directory_path() / "sitsmamba_test_rb";
  std::filesystem::create_directories(dir);
  save_model(model, dir / "full.ckpt");
  auto entries = read_checkpoint(dir / "full.ckpt");
  const auto n = entries.size();
  std::erase_if(entries, [](const CheckpointEntry& e) { return e.name.starts_with("rbranch."); });
  CHECK(entries.size() == n - 2);
  write_checkpoint(dir / "stripped.ckpt", entries);
  auto other = SitsMamba<float>::init(mc, 99);
  load_model(other, dir / "stripped.ckpt");
  CHECK(other.predict(batch) == model.predict(batch));
  std::filesystem::remove_all(dir);
}

TEST_CASE("parameter counts of the default configuration") {
  const auto pc = count_parameters(ModelConfig{});
  CHECK(pc.rbranch == 128 * 10 + 10);
  CHECK(pc.spatial == 159744);
  CHECK(pc.cls_head == 128 * 20 * 9 + 20 + 2 * 20);
  CHECK(pc.total == pc.spatial + pc.temporal + pc.cls_head + pc.rbranch);
  CHECK(double(pc.total) >= 0.7 * 250000);
  CHECK(double(pc.total) <= 1.3 * 250000);
  auto model = SitsMamba<float>::init(ModelConfig{}, 1);
  CHECK(model.count().total == pc.total);
}

TEST_CASE("temporal max-pool ignores masked steps") {
  const TD enc({2, 3, 1}, {1.0, 5.0, 2.0, -1.0, -3.0, 9.0});
  const std::vector<std::uint8_t> valid{1, 0, 1, 1, 1, 0};
  NoGradGuard g;
  CHECK(vals(temporal_maxpool(enc, valid)) == std::vector<double>{2.0, -1.0});
}

}  // TEST_SUITE
