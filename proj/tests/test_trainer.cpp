#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>

#include "helpers.hpp"
#include "sitsmamba/checkpoint.hpp"
#include "sitsmamba/ops.hpp"
#include "sitsmamba/trainer.hpp"

using namespace sitsmamba;
using namespace testing;
namespace fs = std::filesystem;

namespace {

// loss = sum(p * g) so the gradient of p is g
void set_grad(TD& p, const std::vector<double>& g) {
  backward(sum(mul(p, TD(p.shape(), g))));
}

ModelConfig tiny_model() {
  ModelConfig mc;
  mc.input_channels = 3;
  mc.num_classes = 3;
  mc.hidden = 8;
  mc.mamba.d_state = 4;
  mc.validate();
  return mc;
}

Dataset tiny_data(std::uint64_t seed, std::size_t n, double noise = 0.02) {
  SyntheticConfig c;
  c.seed = seed;
  c.curve_seed = 1;
  c.samples = n;
  c.classes = 3;
  c.channels = 3;
  c.length = 8;
  c.height = c.width = 8;
  c.noise = noise;
  c.min_parcels = 2;
  c.max_parcels = 4;
  return generate_synthetic(c);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path temp_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("adam: one step from zero state") {
  const std::vector<double> g{0.5, -2.0, 1e-3, 0.0};
  const std::vector<double> p0{1.0, 2.0, 3.0, 4.0};
  TD p({4}, p0, true);
  Adam<double> adam({{"p", &p, true}}, {1e-3});
  set_grad(p, g);
  CHECK(adam.step());
  for (std::size_t i = 0; i < 4; ++i) {
    // m_hat = g, v_hat = g^2 after bias correction
    const double expect = p0[i] - 1e-3 * g[i] / (std::abs(g[i]) + 1e-8);
    CHECK(p[i] == doctest::Approx(expect).epsilon(1e-14));
  }
  CHECK(adam.steps() == 1);
}

TEST_CASE("adam: zero gradient leaves parameters and decays moments") {
  TD p({2}, {1.0, -1.0}, true);
  Adam<double> adam({{"p", &p, true}}, {1e-2});
  set_grad(p, {1.0, 1.0});
  adam.step();
  const auto after_one = vals(p);
  const auto m1 = adam.first_moment(0), v1 = adam.second_moment(0);
  for (int i = 0; i < 3; ++i) {
    set_grad(p, {0.0, 0.0});
    adam.step();
  }
  // m keeps its sign, so the parameter still drifts; a zero state stays put
  CHECK(adam.first_moment(0)[0] == doctest::Approx(m1[0] * std::pow(0.9, 3)));
  CHECK(adam.second_moment(0)[0] == doctest::Approx(v1[0] * std::pow(0.999, 3)));
  TD q({2}, {5.0, 6.0}, true);
  Adam<double> fresh({{"q", &q, true}}, {1e-2});
  for (int i = 0; i < 5; ++i) {
    set_grad(q, {0.0, 0.0});
    fresh.step();
  }
  CHECK(vals(q) == std::vector<double>{5.0, 6.0});
  CHECK(after_one != vals(p));
}

TEST_CASE("adam: constant gradient steps approach lr * sign(g)") {
  TD p({3}, {0.0, 0.0, 0.0}, true);
  const double lr = 1e-3;
  Adam<double> adam({{"p", &p, true}}, {lr});
  const std::vector<double> g{3.0, -0.01, 250.0};
  std::vector<double> before;
  for (int i = 0; i < 3000; ++i) {
    before = vals(p);
    set_grad(p, g);
    adam.step();
  }
  for (std::size_t i = 0; i < 3; ++i) {
    const double step = p[i] - before[i];
    CHECK(std::abs(std::abs(step) - lr) < 1e-9);
    CHECK((step < 0) == (g[i] > 0));
  }
}

TEST_CASE("adam: non-finite gradient skips the step") {
  TD p({2}, {1.0, 2.0}, true);
  Adam<double> adam({{"p", &p, true}}, {1e-2});
  // ops refuse to produce NaN, so plant it in the gradient directly
  auto g = p.grad_mut();
  g[0] = 1.0;
  g[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(adam.step());
  CHECK(vals(p) == std::vector<double>{1.0, 2.0});
  CHECK(adam.steps() == 0);
  CHECK(grads(p) == std::vector<double>{0.0, 0.0});
  set_grad(p, {1.0, 1.0});
  CHECK(adam.step());
  CHECK(p[0] < 1.0);
}

TEST_CASE("adam: non-trainable tensors are not updated") {
  TD p({1}, {1.0}, true), r({1}, {7.0}, true);
  Adam<double> adam({{"p", &p, true}, {"r", &r, false}}, {1e-2});
  backward(add(sum(p), sum(r)));
  adam.step();
  CHECK(r[0] == 7.0);
  CHECK(p[0] < 1.0);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.epochs = 0;
  CHECK_THROWS(c.validate());
  c = TrainConfig{};
  c.learning_rate = 0;
  CHECK_THROWS(c.validate());
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS(c.validate());
}

TEST_CASE("fisher-yates is a seeded permutation") {
  std::vector<std::size_t> a(50), b;
  std::iota(a.begin(), a.end(), 0);
  b = a;
  Rng r1(3), r2(3);
  fisher_yates(a, r1);
  fisher_yates(b, r2);
  CHECK(a == b);
  std::vector<std::size_t> s = a;
  std::sort(s.begin(), s.end());
  for (std::size_t i = 0; i < 50; ++i) CHECK(s[i] == i);
}

TEST_CASE("loss on a fixed noise-free batch goes down over 20 steps") {
  const auto data = tiny_data(3, 4, 0.0);
  auto mc = tiny_model();
  auto model = SitsMamba<double>::init(mc, 3);
  Adam<double> adam(model.parameters(), {1e-2});
  const auto batch = make_batch(data, {0, 1, 2, 3}, mc.mode, nullptr);
  const auto x = batch_tensor<double>(batch);
  std::vector<double> losses;
  for (int i = 0; i < 20; ++i) {
    auto out = model.forward(x, batch.valid_length, true, true);
    const auto l_cls = classification_loss(out.class_logits, batch.labels, {});
    const auto l_tp = reconstruction_loss(x, out.reconstruction, batch.valid_length, true);
    const auto total = combined_loss(l_cls, l_tp, mc.loss);
    losses.push_back(total[0]);
    backward(total);
    adam.step();
  }
  MESSAGE("loss " << losses.front() << " -> " << losses.back());
  CHECK(losses.back() < 0.8 * losses.front());
}

TEST_CASE("training outputs, determinism and early stop") {
  const auto train_set = tiny_data(4, 8), valid_set = tiny_data(5, 4);
  const auto mc = tiny_model();
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.learning_rate = 1e-2;
  tc.seed = 11;
  const auto d1 = temp_dir("sitsmamba_train_1"), d2 = temp_dir("sitsmamba_train_2");
  for (const auto& d : {d1, d2}) {
    auto model = SitsMamba<float>::init(mc, tc.seed);
    tc.out_dir = d;
    const auto r = train(model, train_set, valid_set, tc);
    CHECK(r.epochs.size() == 2);
    CHECK(r.best_epoch >= 1);
  }
  for (const char* f : {"best.ckpt", "final.ckpt", "train_log.csv", "epoch_log.csv"}) {
    REQUIRE(fs::exists(d1 / f));
    CHECK(slurp(d1 / f) == slurp(d2 / f));
  }

  tc.epochs = 5;
  tc.stop_oa = 1e-9;
  tc.out_dir.clear();
  auto model = SitsMamba<float>::init(mc, tc.seed);
  const auto r = train(model, train_set, valid_set, tc);
  CHECK(r.epochs.size() == 1);
  CHECK(r.stopped_early);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("w0 = 0 and a disabled reconstruction branch train identically") {
  const auto train_set = tiny_data(6, 8);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.learning_rate = 1e-2;
  tc.seed = 12;
  auto a = tiny_model(), b = tiny_model();
  a.loss.w0 = 0;
  b.loss.use_rbranch = false;
  auto ma = SitsMamba<float>::init(a, tc.seed), mb = SitsMamba<float>::init(b, tc.seed);
  train(ma, train_set, {}, tc);
  train(mb, train_set, {}, tc);
  const auto pa = ma.parameters(), pb = mb.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    INFO(pa[i].name);
    CHECK(vals(*pa[i].tensor) == vals(*pb[i].tensor));
  }
}

TEST_CASE("mismatched data is rejected before training") {
  auto mc = tiny_model();
  mc.input_channels = 4;
  mc.validate();
  auto model = SitsMamba<float>::init(mc, 1);
  CHECK_THROWS_AS(train(model, tiny_data(1, 2), {}, TrainConfig{}), ShapeError);
  CHECK_THROWS(train(model, Dataset{}, {}, TrainConfig{}));
}

}  // TEST_SUITE

TEST_SUITE("checkpoint") {

TEST_CASE("save, load and evaluate match in-memory evaluation") {
  const auto data = tiny_data(7, 6);
  const auto mc = tiny_model();
  auto model = SitsMamba<float>::init(mc, 1);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 3;
  tc.learning_rate = 1e-2;
  train(model, data, {}, tc);  // moves weights and running stats off their init
  const auto dir = temp_dir("sitsmamba_ckpt");
  save_model(model, dir / "m.ckpt");
  auto other = SitsMamba<float>::init(mc, 2);
  load_model(other, dir / "m.ckpt");
  const auto pa = model.parameters(), pb = other.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(vals(*pa[i].tensor) == vals(*pb[i].tensor));
  CHECK(evaluate(other, data, 4).counts() == evaluate(model, data, 4).counts());
  CHECK(predict_dataset(other, data, 4) == predict_dataset(model, data, 4));

  auto bytes = slurp(dir / "m.ckpt");
  CHECK(bytes.substr(0, 8) == "SITSMB01");
  fs::remove_all(dir);
}

TEST_CASE("bad checkpoints are rejected") {
  const auto dir = temp_dir("sitsmamba_ckpt_bad");
  auto mc = tiny_model();
  auto model = SitsMamba<float>::init(mc, 1);
  save_model(model, dir / "m.ckpt");
  {
    std::ofstream out(dir / "magic.ckpt", std::ios::binary);
    out << "NOTACKPT";
  }
  CHECK_THROWS(load_model(model, dir / "magic.ckpt"));
  fs::copy_file(dir / "m.ckpt", dir / "short.ckpt");
  fs::resize_file(dir / "short.ckpt", fs::file_size(dir / "short.ckpt") - 5);
  CHECK_THROWS(load_model(model, dir / "short.ckpt"));
  mc.hidden = 16;
  mc.validate();
  auto wider = SitsMamba<float>::init(mc, 1);
  CHECK_THROWS(load_model(wider, dir / "m.ckpt"));
  auto entries = read_checkpoint(dir / "m.ckpt");
  entries.push_back({"stray.weight", {1}, {0.0f}});
  write_checkpoint(dir / "extra.ckpt", entries);
  CHECK_THROWS(load_model(model, dir / "extra.ckpt"));
  fs::remove_all(dir);
}

}  // TEST_SUITE
