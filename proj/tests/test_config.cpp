#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "sitsmamba/config.hpp"

using namespace sitsmamba;

TEST_SUITE("config") {

TEST_CASE("defaults") {
  RunConfig c;
  c.finalize();
  CHECK(c.train.epochs == 100);
  CHECK(c.train.learning_rate == 1e-4);
  CHECK(c.model.loss.w0 == 0.03);
  CHECK(c.model.hidden == 128);
  CHECK(c.model.mamba.d_state == 16);
  CHECK(c.data.curve_seed == c.data.seed);
}

TEST_CASE("parse with comments, then write and reparse") {
  RunConfig c;
  std::istringstream in("# run\nseed = 9\nlr=3e-4\n\nuse_pw=off  # ablation\nmode=sample30\neval_classes=1,2\n");
  c.parse(in, "test");
  c.finalize();
  CHECK(c.train.seed == 9);
  CHECK(c.data.seed == 9);
  CHECK(c.data.curve_seed == 9);
  CHECK(c.train.learning_rate == 3e-4);
  CHECK_FALSE(c.model.loss.use_pw);
  CHECK(c.model.mode == TemporalMode::Sample30);
  CHECK(c.train.eval_classes == std::set<std::size_t>{1, 2});

  std::ostringstream out;
  c.write(out);
  RunConfig d;
  std::istringstream back(out.str());
  d.parse(back, "round trip");
  d.finalize();
  for (const auto& k : RunConfig::keys()) CHECK(d.get(k) == c.get(k));
}

TEST_CASE("bad keys and values") {
  RunConfig c;
  CHECK_THROWS_AS(c.set("nope", "1"), ConfigError);
  CHECK_THROWS_AS(c.set("lr", "abc"), ConfigError);
  CHECK_THROWS_AS(c.set("epochs", "-3"), ConfigError);
  CHECK_THROWS_AS(c.set("epochs", "2.5"), ConfigError);
  CHECK_THROWS_AS(c.set("use_pw", "maybe"), ConfigError);
  CHECK_THROWS_AS(c.set("mode", "cubic"), ConfigError);
  CHECK_THROWS_AS(c.set("eval_classes", "1,x"), ConfigError);
  std::istringstream in("seed 4\n");
  CHECK_THROWS_AS(c.parse(in, "x"), ConfigError);
  c.set("lr", "0");
  CHECK_THROWS_AS(c.finalize(), ConfigError);
}

TEST_CASE("20-class default eval and ignore sets") {
  RunConfig c;
  c.set("classes", "20");
  c.finalize();
  CHECK(c.model.loss.ignore_labels == std::set<std::size_t>{19});
  CHECK(c.train.eval_classes.size() == 18);
  CHECK(*c.train.eval_classes.begin() == 1);
  CHECK(*c.train.eval_classes.rbegin() == 18);

  RunConfig d;
  d.set("classes", "20");
  d.set("eval_classes", "");
  d.set("ignore_labels", "");
  d.finalize();
  CHECK(d.train.eval_classes.empty());
  CHECK(d.model.loss.ignore_labels.empty());
}

TEST_CASE("explicit curve seed survives") {
  RunConfig c;
  c.set("curve_seed", "5");
  c.set("seed", "8");
  c.finalize();
  CHECK(c.data.curve_seed == 5);
  CHECK(c.explicitly_set("seed"));
  CHECK_FALSE(c.explicitly_set("lr"));
}

TEST_CASE("manifest loads back as a config") {
  RunConfig c;
  c.set("hidden", "32");
  c.set("w0", "0.1");
  c.finalize();
  const auto p = std::filesystem::temp_directory_path() / "sitsmamba_manifest.txt";
  c.write_manifest(p, "train");
  RunConfig d;
  d.load_file(p);
  d.finalize();
  CHECK(d.model.hidden == 32);
  CHECK(d.model.loss.w0 == 0.1);
  std::filesystem::remove(p);
  CHECK_THROWS_AS(d.load_file(p), ConfigError);
}

TEST_CASE("index sets") {
  CHECK(parse_index_set("") == std::set<std::size_t>{});
  CHECK(parse_index_set("3, 1,2") == std::set<std::size_t>{1, 2, 3});
  CHECK(parse_index_set("1,,2,") == std::set<std::size_t>{1, 2});  // empty items are skipped
  CHECK_THROWS_AS(parse_index_set("1,-2"), ConfigError);
}

}  // TEST_SUITE
