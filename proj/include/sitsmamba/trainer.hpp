#pragma once

// Adam optimizer and the epoch loop: shuffle, forward, combined loss,
// backward, update; validation, logging and checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "sitsmamba/metrics.hpp"
#include "sitsmamba/model.hpp"

namespace sitsmamba {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamConfig config);

  /// Bias-corrected update of every trainable parameter holding a
  /// gradient. A non-finite gradient skips the whole step (returns false)
  /// and reports through the log hook. Gradients are zeroed either way.
  bool step();
  void zero_grad();

  std::uint64_t steps() const { return t_; }
  const std::vector<T>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<T>& second_moment(std::size_t i) const { return v_[i]; }
  const ParamList<T>& params() const { return params_; }
  AdamConfig& config() { return config_; }

 private:
  ParamList<T> params_;
  AdamConfig config_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t t_ = 0;
};

struct TrainConfig {
  std::size_t epochs = 100;
  double learning_rate = 1e-4;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  bool eval_every_epoch = true;
  /// Classes averaged into mIoU / mF1; empty = all.
  std::set<std::size_t> eval_classes;
  /// Stop once validation reaches both thresholds; 0 disables a threshold,
  /// both 0 trains all epochs.
  double stop_oa = 0;
  double stop_mf1 = 0;
  /// Where logs and checkpoints go; empty writes nothing.
  std::filesystem::path out_dir;

  void validate() const;
};

struct EpochSummary {
  std::size_t epoch = 0;
  double mean_loss = 0;
  double mean_l_cls = 0;
  double mean_l_tp = 0;
  std::size_t skipped_steps = 0;
  std::optional<Scores> validation;
  double seconds = 0;
};

struct TrainResult {
  std::vector<EpochSummary> epochs;
  std::size_t best_epoch = 0;
  double best_mf1 = -1;
  bool stopped_early = false;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Hooks for progress and notices (skipped steps, divergence).
struct TrainHooks {
  std::function<void(const EpochSummary&)> on_epoch;
  std::function<void(const std::string&)> log;
};

template <typename T>
TrainResult train(SitsMamba<T>& model, const Dataset& train_set, const Dataset& valid_set, const TrainConfig& config,
                  const TrainHooks& hooks = {});

/// Inference-mode confusion matrix over a dataset.
template <typename T>
ConfusionMatrix evaluate(SitsMamba<T>& model, const Dataset& data, std::size_t batch_size,
                         const std::set<std::size_t>& eval_classes = {});

/// Inference-mode label maps, one per sample, [H, W] each.
template <typename T>
std::vector<std::vector<std::uint16_t>> predict_dataset(SitsMamba<T>& model, const Dataset& data,
                                                        std::size_t batch_size);

/// In-place Fisher-Yates shuffle driven by rng.
void fisher_yates(std::vector<std::size_t>& v, Rng& rng);

}  // namespace sitsmamba
