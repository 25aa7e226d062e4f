#include "sitsmamba/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>

#include "sitsmamba/checkpoint.hpp"

namespace sitsmamba {

template <typename T>
Adam<T>::Adam(ParamList<T> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  if (!(config_.lr > 0)) throw std::invalid_argument("adam: learning rate must be > 0");
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor->numel(), T{0});
    v_.emplace_back(p.tensor->numel(), T{0});
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.tensor->zero_grad();
}

template <typename T>
bool Adam<T>::step() {
  for (const auto& p : params_) {
    if (!p.trainable || !p.tensor->has_grad()) continue;
    for (T g : p.tensor->grad()) {
      if (!std::isfinite(g)) {
        zero_grad();
        return false;
      }
    }
  }
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.trainable || !p.tensor->has_grad()) continue;
    const auto g = p.tensor->grad();
    auto w = p.tensor->values_mut();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = static_cast<T>(b1 * m[j] + (1.0 - b1) * g[j]);
      v[j] = static_cast<T>(b2 * v[j] + (1.0 - b2) * double(g[j]) * g[j]);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] = static_cast<T>(w[j] - config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
  }
  zero_grad();
  return true;
}

void TrainConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("train: epochs must be >= 1");
  if (!(learning_rate > 0)) throw std::invalid_argument("train: learning rate must be > 0");
  if (batch_size == 0) throw std::invalid_argument("train: batch size must be >= 1");
  if (stop_oa < 0 || stop_oa > 1 || stop_mf1 < 0 || stop_mf1 > 1) {
    throw std::invalid_argument("train: stop thresholds must lie in [0, 1]");
  }
}

void fisher_yates(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.uniform_int(0, i - 1)]);
}

namespace {

std::vector<std::vector<std::size_t>> chunks(const std::vector<std::size_t>& order, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += size) {
    out.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + size));
  }
  return out;
}

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

void check_dataset(const ModelConfig& cfg, const Dataset& data, const char* which) {
  for (const auto& s : data) {
    if (s.c != cfg.input_channels) {
      throw ShapeError(std::string(which) + " sample " + std::to_string(s.id) + " has " +
                                  std::to_string(s.c) + " channels, model expects " +
                                  std::to_string(cfg.input_channels));
    }
    for (auto l : s.labels) {
      if (l >= cfg.num_classes && !cfg.loss.ignore_labels.count(l)) {
        throw std::invalid_argument(std::string(which) + " sample " + std::to_string(s.id) + " has label " +
                                    std::to_string(l) + " >= " + std::to_string(cfg.num_classes) + " classes");
      }
    }
  }
}

}  // namespace

template <typename T>
ConfusionMatrix evaluate(SitsMamba<T>& model, const Dataset& data, std::size_t batch_size,
                         const std::set<std::size_t>& eval_classes) {
  const auto& cfg = model.config();
  check_dataset(cfg, data, "evaluation");
  ConfusionMatrix cm(cfg.num_classes, eval_classes);
  for (const auto& idx : chunks(iota_n(data.size()), batch_size)) {
    const auto batch = make_batch(data, idx, cfg.mode, nullptr);
    cm.accumulate(batch.labels, model.predict(batch), cfg.loss.ignore_labels);
  }
  return cm;
}

template <typename T>
std::vector<std::vector<std::uint16_t>> predict_dataset(SitsMamba<T>& model, const Dataset& data,
                                                        std::size_t batch_size) {
  check_dataset(model.config(), data, "prediction");
  std::vector<std::vector<std::uint16_t>> out;
  for (const auto& idx : chunks(iota_n(data.size()), batch_size)) {
    const auto batch = make_batch(data, idx, model.config().mode, nullptr);
    const auto labels = model.predict(batch);
    const std::size_t hw = batch.h * batch.w;
    for (std::size_t i = 0; i < batch.n; ++i) out.emplace_back(labels.begin() + i * hw, labels.begin() + (i + 1) * hw);
  }
  return out;
}

template <typename T>
TrainResult train(SitsMamba<T>& model, const Dataset& train_set, const Dataset& valid_set, const TrainConfig& config,
                  const TrainHooks& hooks) {
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  const ModelConfig& mcfg = model.config();
  check_dataset(mcfg, train_set, "training");
  check_dataset(mcfg, valid_set, "validation");
  auto log = hooks.log ? hooks.log : [](const std::string& m) { std::cerr << m << '\n'; };

  std::ofstream loss_log, epoch_log;
  const bool write = !config.out_dir.empty();
  if (write) {
    std::filesystem::create_directories(config.out_dir);
    loss_log.open(config.out_dir / "train_log.csv");
    epoch_log.open(config.out_dir / "epoch_log.csv");
    if (!loss_log || !epoch_log) throw std::runtime_error("train: cannot write logs in " + config.out_dir.string());
    write_loss_header(loss_log);
    epoch_log << "epoch,mean_total,mean_l_cls,mean_l_tp,skipped_steps,val_oa,val_miou,val_mf1\n";
  }

  Adam<T> adam(model.parameters(), {config.learning_rate});
  Rng rng(config.seed ^ 0x7261696eull);
  std::vector<std::size_t> order = iota_n(train_set.size());
  const bool use_rbranch = mcfg.loss.use_rbranch;
  TrainResult result;
  std::size_t step = 0;
  int consecutive_bad = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    fisher_yates(order, rng);
    EpochSummary summary;
    summary.epoch = epoch;
    std::size_t good = 0;
    for (const auto& idx : chunks(order, config.batch_size)) {
      ++step;
      const auto batch = make_batch(train_set, idx, mcfg.mode, &rng);
      LossReport report;
      bool ok = true;
      try {
        const auto x = batch_tensor<T>(batch);
        auto out = model.forward(x, batch.valid_length, true, use_rbranch);
        const auto l_cls = classification_loss(out.class_logits, batch.labels, mcfg.loss.ignore_labels);
        Tensor<T> l_tp;
        if (use_rbranch) l_tp = reconstruction_loss(x, out.reconstruction, batch.valid_length, mcfg.loss.use_pw);
        const auto total = combined_loss(l_cls, l_tp, mcfg.loss, &report);
        backward(total);
        ok = adam.step();
        if (!ok) log("step " + std::to_string(step) + ": non-finite gradient, update skipped");
      } catch (const NumericError& e) {
        Tape<T>::local().clear();
        adam.zero_grad();
        ok = false;
        report.total = std::nan("");
        log("step " + std::to_string(step) + ": " + e.what());
        if (++consecutive_bad >= 2) {
          throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + ", step " +
                                 std::to_string(step) + ": loss non-finite twice in a row (" + e.what() + ")");
        }
      }
      if (ok) {
        consecutive_bad = 0;
        ++good;
        summary.mean_loss += report.total;
        summary.mean_l_cls += report.l_cls;
        summary.mean_l_tp += report.l_tp;
      } else {
        ++summary.skipped_steps;
      }
      if (write) write_loss_row(loss_log, epoch, step, report);
    }
    if (good) {
      summary.mean_loss /= static_cast<double>(good);
      summary.mean_l_cls /= static_cast<double>(good);
      summary.mean_l_tp /= static_cast<double>(good);
    }

    const bool last = epoch == config.epochs;
    if (!valid_set.empty() && (config.eval_every_epoch || last)) {
      summary.validation = evaluate(model, valid_set, config.batch_size, config.eval_classes).scores();
      if (summary.validation->mf1 > result.best_mf1) {
        result.best_mf1 = summary.validation->mf1;
        result.best_epoch = epoch;
        if (write) save_model(model, config.out_dir / "best.ckpt");
      }
    }
    summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (write) {
      epoch_log << epoch << ',' << std::setprecision(9) << summary.mean_loss << ',' << summary.mean_l_cls << ','
                << summary.mean_l_tp << ',' << summary.skipped_steps;
      if (summary.validation) {
        epoch_log << ',' << summary.validation->oa << ',' << summary.validation->miou << ','
                  << summary.validation->mf1 << '\n';
      } else {
        epoch_log << ",,,\n";
      }
      epoch_log.flush();
      loss_log.flush();
    }
    result.epochs.push_back(summary);
    if (hooks.on_epoch) hooks.on_epoch(summary);

    const bool thresholds = config.stop_oa > 0 || config.stop_mf1 > 0;
    if (thresholds && summary.validation && summary.validation->oa >= config.stop_oa &&
        summary.validation->mf1 >= config.stop_mf1) {
      result.stopped_early = !last;
      break;
    }
  }
  if (write) save_model(model, config.out_dir / "final.ckpt");
  return result;
}

template class Adam<float>;
template class Adam<double>;
template TrainResult train(SitsMamba<float>&, const Dataset&, const Dataset&, const TrainConfig&, const TrainHooks&);
template TrainResult train(SitsMamba<double>&, const Dataset&, const Dataset&, const TrainConfig&, const TrainHooks&);
template ConfusionMatrix evaluate(SitsMamba<float>&, const Dataset&, std::size_t, const std::set<std::size_t>&);
template ConfusionMatrix evaluate(SitsMamba<double>&, const Dataset&, std::size_t, const std::set<std::size_t>&);
template std::vector<std::vector<std::uint16_t>> predict_dataset(SitsMamba<float>&, const Dataset&, std::size_t);
template std::vector<std::vector<std::uint16_t>> predict_dataset(SitsMamba<double>&, const Dataset&, std::size_t);

}  // namespace sitsmamba
