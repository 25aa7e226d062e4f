#include "commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "sitsmamba/checkpoint.hpp"
#include "sitsmamba/verify.hpp"

namespace sitsmamba::cli {

namespace fs = std::filesystem;

SyntheticConfig split_config(const RunConfig& config, int split) {
  SyntheticConfig s = config.data;
  // splits get unrelated streams but one set of class curves
  Rng rng(config.data.seed ^ 0x73706c6974ull);
  for (int i = 0; i <= split; ++i) s.seed = rng.fork();
  s.samples = split == 0 ? config.data.samples : split == 1 ? config.valid_samples : config.test_samples;
  return s;
}

void check_dataset(const Dataset& data, const ModelConfig& model, const std::string& what) {
  if (data.empty()) throw ShapeError(what + ": dataset is empty");
  const auto& first = data.front();
  for (const auto& s : data) {
    if (s.c != model.input_channels) {
      throw ShapeError(what + ": sample " + std::to_string(s.id) + " has " + std::to_string(s.c) +
                       " channels, config says " + std::to_string(model.input_channels));
    }
    if (s.h != first.h || s.w != first.w) throw ShapeError(what + ": samples differ in H x W");
    if (s.valid_length == 0 || s.valid_length > s.t) throw ShapeError(what + ": bad valid length");
    for (auto l : s.labels) {
      if (l >= model.num_classes) {
        throw ShapeError(what + ": label " + std::to_string(l) + " >= num_classes " +
                         std::to_string(model.num_classes));
      }
    }
  }
}

namespace {

void write_manifest(const RunConfig& config, const fs::path& dir, const std::string& command) {
  fs::create_directories(dir);
  config.write_manifest(dir / kManifestFile, command);
}

Dataset load_split(const fs::path& path, const ModelConfig& model) {
  if (!fs::exists(path)) throw FormatError("missing dataset " + path.string());
  auto data = load_dataset(path);
  check_dataset(data, model, path.string());
  return data;
}

fs::path eval_input(const Paths& paths) {
  if (!paths.input.empty()) return paths.input;
  if (!paths.data.empty()) return paths.data / kTestFile;
  throw ConfigError("need --input or --data");
}

SitsMamba<float> load_trained(const RunConfig& config, const Paths& paths) {
  if (paths.checkpoint.empty()) throw ConfigError("need --checkpoint");
  if (!fs::exists(paths.checkpoint)) throw FormatError("missing checkpoint " + paths.checkpoint.string());
  auto model = SitsMamba<float>::init(config.model, config.train.seed);
  load_model(model, paths.checkpoint);
  return model;
}

}  // namespace

void gen_data(const RunConfig& config, const Paths& paths, std::ostream& log) {
  write_manifest(config, paths.out, "gen-data");
  const char* names[3] = {kTrainFile, kValidFile, kTestFile};
  for (int split = 0; split < 3; ++split) {
    const auto sc = split_config(config, split);
    const auto data = generate_synthetic(sc);
    save_dataset(data, paths.out / names[split]);
    log << names[split] << ": " << data.size() << " samples, T=" << sc.length << " C=" << sc.channels
        << " H=" << sc.height << " W=" << sc.width << " K=" << sc.classes << '\n';
  }
}

void train_command(const RunConfig& config, const Paths& paths, std::ostream& log) {
  if (paths.data.empty()) throw ConfigError("train: need --data");
  const auto train_set = load_split(paths.data / kTrainFile, config.model);
  Dataset valid_set;
  if (fs::exists(paths.data / kValidFile)) valid_set = load_split(paths.data / kValidFile, config.model);
  write_manifest(config, paths.out, "train");

  auto model = SitsMamba<float>::init(config.model, config.train.seed);
  TrainConfig tc = config.train;
  tc.out_dir = paths.out;
  TrainHooks hooks;
  hooks.log = [&log](const std::string& m) { log << m << '\n'; };
  hooks.on_epoch = [&log](const EpochSummary& s) {
    log << "epoch " << s.epoch << "  loss " << std::setprecision(5) << s.mean_loss << "  l_cls " << s.mean_l_cls
        << "  l_tp " << s.mean_l_tp;
    if (s.validation) log << "  val OA " << s.validation->oa << "  mF1 " << s.validation->mf1;
    log << "  (" << std::setprecision(3) << s.seconds << " s)" << std::endl;
  };
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = train(model, train_set, valid_set, tc, hooks);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log << "trained " << result.epochs.size() << " epochs in " << std::setprecision(4) << secs << " s";
  if (result.best_epoch) log << ", best validation mF1 " << result.best_mf1 << " at epoch " << result.best_epoch;
  if (result.stopped_early) log << " (stopped early)";
  log << '\n';
}

void eval_command(const RunConfig& config, const Paths& paths, std::ostream& log) {
  const auto input = eval_input(paths);
  const auto data = load_split(input, config.model);
  auto model = load_trained(config, paths);
  write_manifest(config, paths.out, "eval");
  const auto cm = evaluate(model, data, config.eval_batch_size, config.train.eval_classes);
  const auto scores = cm.scores();
  std::ofstream csv(paths.out / "metrics.csv");
  write_scores_csv(csv, scores);
  log << input.string() << ": " << data.size() << " samples\n";
  print_scores(log, scores);
}

void predict_command(const RunConfig& config, const Paths& paths, std::ostream& log) {
  if (config.model.num_classes > 256) throw ConfigError("predict: PGM export holds at most 256 classes");
  const auto input = eval_input(paths);
  const auto data = load_split(input, config.model);
  auto model = load_trained(config, paths);
  write_manifest(config, paths.out, "predict");
  const auto maps = predict_dataset(model, data, config.eval_batch_size);
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[48];
    std::snprintf(name, sizeof name, "pred_%06llu.pgm", static_cast<unsigned long long>(data[i].id));
    write_pgm(paths.out / name, maps[i], data[i].h, data[i].w);
  }
  write_legend(paths.out / "legend.csv", config.model.num_classes, {});
  log << "wrote " << maps.size() << " label maps to " << paths.out.string() << '\n';
}

bool verify_command(std::ostream& log) {
  const auto report = verify::run_all();
  report.print(log);
  const bool ok = report.passed();
  log << (ok ? "all checks passed" : "VERIFICATION FAILED") << '\n';
  return ok;
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Satellite image time series segmentation with a Mamba temporal encoder"};
  app.require_subcommand(1);

  std::vector<std::pair<std::string, std::string>> overrides;
  std::string config_path;
  Paths paths;
  paths.out = "out";

  auto key_option = [&overrides](CLI::App* sub, const std::string& flag, const std::string& key,
                                 const std::string& help) {
    sub->add_option_function<std::string>(
        flag, [&overrides, key](const std::string& v) { overrides.emplace_back(key, v); }, help);
  };
  auto switch_flag = [&overrides](CLI::App* sub, const std::string& flag, const std::string& key,
                                  const std::string& value, const std::string& help) {
    sub->add_flag_callback(flag, [&overrides, key, value] { overrides.emplace_back(key, value); }, help);
  };
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "flat key=value file; flags override it")->check(CLI::ExistingFile);
    sub->add_option_function<std::vector<std::string>>(
        "--set",
        [&overrides](const std::vector<std::string>& kvs) {
          for (const auto& kv : kvs) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected key=value, got " + kv);
            overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
          }
        },
        "any config key, as key=value");
    sub->add_option("--out", paths.out, "output directory");
    key_option(sub, "--seed", "seed", "run seed");
    key_option(sub, "--classes", "classes", "number of classes K");
    key_option(sub, "--channels", "channels", "spectral bands C");
    key_option(sub, "--mode", "mode", "temporal mode: pad | sample30");
  };
  auto training_flags = [&](CLI::App* sub) {
    key_option(sub, "--epochs", "epochs", "epochs (default 100)");
    key_option(sub, "--lr", "lr", "Adam learning rate (default 1e-4)");
    key_option(sub, "--batch-size", "batch_size", "batch size");
    key_option(sub, "--w0", "w0", "reconstruction loss weight (default 0.03)");
    key_option(sub, "--stop-oa", "stop_oa", "stop once validation OA reaches this (0 = never)");
    key_option(sub, "--stop-mf1", "stop_mf1", "stop once validation mF1 reaches this (0 = never)");
    switch_flag(sub, "--no-pw", "use_pw", "false", "uniform step weights in the reconstruction loss");
    switch_flag(sub, "--no-w1", "use_w1", "false", "fix the dynamic balance factor to 1");
    switch_flag(sub, "--no-rbranch", "use_rbranch", "false", "drop the reconstruction branch from training");
  };

  auto* gen = app.add_subcommand("gen-data", "write synthetic train/valid/test splits");
  common(gen);
  key_option(gen, "--samples", "samples", "training samples");
  key_option(gen, "--valid-samples", "valid_samples", "validation samples");
  key_option(gen, "--test-samples", "test_samples", "test samples");
  key_option(gen, "--length", "length", "time steps T");
  key_option(gen, "--height", "height", "patch height");
  key_option(gen, "--width", "width", "patch width");
  key_option(gen, "--noise", "noise", "Gaussian noise sigma");
  key_option(gen, "--jitter", "jitter", "per-sample season shift");
  switch_flag(gen, "--variable-length", "variable_length", "true", "draw per-sample valid lengths");

  auto* tr = app.add_subcommand("train", "train on <data>/train.sitsds, select on valid.sitsds");
  common(tr);
  training_flags(tr);
  tr->add_option("--data", paths.data, "dataset directory")->required();

  auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset");
  common(ev);
  ev->add_option("--checkpoint", paths.checkpoint, "SITSMB01 checkpoint")->required();
  ev->add_option("--data", paths.data, "dataset directory (uses test.sitsds)");
  ev->add_option("--input", paths.input, "dataset file");

  auto* pr = app.add_subcommand("predict", "export label maps as PGM");
  common(pr);
  pr->add_option("--checkpoint", paths.checkpoint, "SITSMB01 checkpoint")->required();
  pr->add_option("--data", paths.data, "dataset directory (uses test.sitsds)");
  pr->add_option("--input", paths.input, "dataset file");

  auto* vf = app.add_subcommand("verify", "run the oracle suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  if (vf->parsed()) return verify_command(out) ? kOk : kVerifyFailed;

  RunConfig config;
  try {
    if (!config_path.empty()) config.load_file(config_path);
    for (const auto& [k, v] : overrides) config.set(k, v);
    if (gen->parsed() && config.model.mode == TemporalMode::Sample30 && !config.explicitly_set("length")) {
      config.set("length", "46");  // long enough that 30 frames are a real subsample
    }
    config.finalize();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (gen->parsed()) gen_data(config, paths, out);
    if (tr->parsed()) train_command(config, paths, out);
    if (ev->parsed()) eval_command(config, paths, out);
    if (pr->parsed()) predict_command(config, paths, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kOk;
}

}  // namespace sitsmamba::cli
