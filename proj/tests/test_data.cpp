#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "sitsmamba/data.hpp"

using namespace sitsmamba;
namespace fs = std::filesystem;

namespace {

// 1-nearest-centroid on per-pixel temporal profiles, centroids fitted on
// the same data; returns the fraction of pixels assigned their own class.
double centroid_accuracy(const Dataset& data, std::size_t classes) {
  const std::size_t T = data[0].t, C = data[0].c;
  std::vector<std::vector<double>> sum(classes, std::vector<double>(T * C, 0.0));
  std::vector<std::size_t> count(classes, 0);
  auto profile = [&](const SitsSample& s, std::size_t p, std::size_t i) {
    const std::size_t t = i / C, c = i % C;
    return double(s.series[(t * C + c) * s.h * s.w + p]);
  };
  for (const auto& s : data)
    for (std::size_t p = 0; p < s.h * s.w; ++p) {
      const auto k = s.labels[p];
      ++count[k];
      for (std::size_t i = 0; i < T * C; ++i) sum[k][i] += profile(s, p, i);
    }
  for (std::size_t k = 0; k < classes; ++k)
    for (auto& v : sum[k]) v /= double(std::max<std::size_t>(count[k], 1));
  std::size_t hit = 0, total = 0;
  for (const auto& s : data)
    for (std::size_t p = 0; p < s.h * s.w; ++p) {
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t k = 0; k < classes; ++k) {
        if (!count[k]) continue;
        double d = 0;
        for (std::size_t i = 0; i < T * C; ++i) d += (profile(s, p, i) - sum[k][i]) * (profile(s, p, i) - sum[k][i]);
        if (d < best_d) best_d = d, best = k;
      }
      hit += best == s.labels[p];
      ++total;
    }
  return double(hit) / double(total);
}

SyntheticConfig small(std::uint64_t seed) {
  SyntheticConfig c;
  c.seed = seed;
  c.curve_seed = seed;
  c.samples = 12;
  return c;
}

fs::path temp_dir(const char* name) {
  const auto d = fs::temp_directory_path() / name;
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("generator is deterministic and stays in range") {
  const auto a = generate_synthetic(small(7)), b = generate_synthetic(small(7));
  CHECK(a == b);
  CHECK(a != generate_synthetic(small(8)));
  for (const auto& s : a) {
    CHECK(s.series.size() == std::size_t(s.t) * s.frame_size());
    for (float v : s.series) CHECK((v >= 0.0f && v <= 1.0f));
    for (auto l : s.labels) CHECK(l < 6);
  }
}

TEST_CASE("generator rejects degenerate settings") {
  auto c = small(1);
  c.classes = 1;
  CHECK_THROWS(generate_synthetic(c));
  c = small(1);
  c.length = 3;
  CHECK_THROWS(generate_synthetic(c));
  c = small(1);
  c.height = 0;
  CHECK_THROWS(generate_synthetic(c));
}

TEST_CASE("noise-free classes are separable by nearest centroid") {
  auto c = small(3);
  c.samples = 20;
  c.noise = 0;
  CHECK(centroid_accuracy(generate_synthetic(c), c.classes) == 1.0);
}

TEST_CASE("centroid accuracy falls with noise") {
  auto c = small(4);
  c.samples = 20;
  std::vector<double> acc;
  for (double sigma : {0.0, 0.05, 0.2}) {
    c.noise = sigma;
    acc.push_back(centroid_accuracy(generate_synthetic(c), c.classes));
  }
  MESSAGE("accuracy at sigma 0 / 0.05 / 0.2: " << acc[0] << " " << acc[1] << " " << acc[2]);
  CHECK(acc[0] >= acc[1]);
  CHECK(acc[1] >= acc[2]);
  CHECK(acc[0] > acc[2]);
}

TEST_CASE("every class appears in a 50 sample set") {
  auto c = small(5);
  c.samples = 50;
  for (std::size_t k : {6u, 20u}) {
    c.classes = k;
    std::set<std::uint16_t> seen;
    for (const auto& s : generate_synthetic(c)) seen.insert(s.labels.begin(), s.labels.end());
    CHECK(seen.size() == k);
  }
}

TEST_CASE("variable lengths are zero padded") {
  auto c = small(6);
  c.variable_length = true;
  c.samples = 30;
  for (const auto& s : generate_synthetic(c)) {
    CHECK(s.valid_length >= 10);
    CHECK(s.valid_length <= 20);
    for (std::size_t i = std::size_t(s.valid_length) * s.frame_size(); i < s.series.size(); ++i)
      CHECK(s.series[i] == 0.0f);
  }
}

TEST_CASE("pad batch") {
  auto data = generate_synthetic(small(7));
  SitsSample a = data[0], b = data[1];
  a.t = 5;
  a.valid_length = 5;
  a.series.resize(5 * a.frame_size());
  b.t = 8;
  b.valid_length = 8;
  b.series.resize(8 * b.frame_size());
  const auto batch = pad_batch({&a, &b});
  CHECK(batch.t == 8);
  const auto mask = batch.frame_mask();
  for (std::size_t t = 0; t < 8; ++t) {
    CHECK(mask[t] == (t < 5));
    CHECK(mask[8 + t] == 1);
  }
  CHECK(std::equal(a.series.begin(), a.series.end(), batch.series.begin()));
  CHECK(std::all_of(batch.series.begin() + a.series.size(), batch.series.begin() + 8 * a.frame_size(),
                    [](float v) { return v == 0.0f; }));

  const auto same = pad_batch({&data[2], &data[3]});
  CHECK(same.t == data[2].t);
  for (auto m : same.frame_mask()) CHECK(m == 1);
  CHECK(std::equal(data[2].series.begin(), data[2].series.end(), same.series.begin()));
  CHECK_THROWS(pad_batch({}));
}

TEST_CASE("30-frame sampling") {
  std::vector<std::size_t> even;
  for (std::size_t i = 0; i < 60; i += 2) even.push_back(i);
  CHECK(sample_indices(60, nullptr) == even);
  CHECK(sample_indices(30, nullptr).back() == 29);

  Rng rng(8);
  const auto idx = sample_indices(73, &rng);
  CHECK(idx.size() == 30);
  CHECK(std::is_sorted(idx.begin(), idx.end()));
  CHECK(std::adjacent_find(idx.begin(), idx.end()) == idx.end());
  CHECK(idx.back() < 73);

  std::vector<std::string> seen;
  set_data_log([&seen](const std::string& m) { seen.push_back(m); });
  const auto rep = sample_indices(12, &rng);
  set_data_log({});
  CHECK(rep.size() == 30);
  CHECK(std::all_of(rep.begin(), rep.end(), [](std::size_t i) { return i < 12; }));
  CHECK_FALSE(seen.empty());
}

TEST_CASE("sample30 batch has exactly 30 frames") {
  auto c = small(9);
  c.length = 46;
  const auto data = generate_synthetic(c);
  Rng rng(9);
  for (Rng* r : {static_cast<Rng*>(nullptr), &rng}) {
    const auto b = make_batch(data, {0, 1, 2}, TemporalMode::Sample30, r);
    CHECK(b.t == 30);
    CHECK(b.n == 3);
  }
}

TEST_CASE("container round trip, empty file and bad input") {
  const auto dir = temp_dir("sitsmamba_test_data");
  auto c = small(10);
  c.variable_length = true;
  const auto data = generate_synthetic(c);
  save_dataset(data, dir / "a.sitsds");
  CHECK(load_dataset(dir / "a.sitsds") == data);

  save_dataset({}, dir / "empty.sitsds");
  CHECK(fs::file_size(dir / "empty.sitsds") == 12);
  CHECK(load_dataset(dir / "empty.sitsds").empty());

  {
    std::fstream f(dir / "a.sitsds", std::ios::in | std::ios::out | std::ios::binary);
    f.put('X');
  }
  CHECK_THROWS_AS(load_dataset(dir / "a.sitsds"), FormatError);

  save_dataset(data, dir / "b.sitsds");
  fs::resize_file(dir / "b.sitsds", fs::file_size(dir / "b.sitsds") - 3);
  CHECK_THROWS_AS(load_dataset(dir / "b.sitsds"), FormatError);
  CHECK_THROWS(load_dataset(dir / "missing.sitsds"));
  fs::remove_all(dir);
}

TEST_CASE("PGM label maps round trip") {
  const auto dir = temp_dir("sitsmamba_test_pgm");
  std::vector<std::uint16_t> labels{0, 1, 2, 19, 255, 7};
  write_pgm(dir / "m.pgm", labels, 2, 3);
  std::size_t h = 0, w = 0;
  CHECK(read_pgm(dir / "m.pgm", h, w) == labels);
  CHECK((h == 2 && w == 3));
  labels[0] = 256;
  CHECK_THROWS(write_pgm(dir / "bad.pgm", labels, 2, 3));
  write_legend(dir / "legend.csv", 3, {});
  std::ifstream in(dir / "legend.csv");
  std::string all((std::istreambuf_iterator<char>(in)), {});
  CHECK(std::count(all.begin(), all.end(), '\n') >= 3);
  fs::remove_all(dir);
}

}  // TEST_SUITE
