#pragma once

// Spatial ConvBlock -> per-pixel Mamba temporal encoder -> classification
// branch (masked temporal max-pool + conv head) and reconstruction branch
// (per-step linear map back to the input bands).

#include <cstdint>
#include <span>
#include <vector>

#include "sitsmamba/data.hpp"
#include "sitsmamba/losses.hpp"
#include "sitsmamba/nn.hpp"
#include "sitsmamba/spatial.hpp"
#include "sitsmamba/ssm.hpp"

namespace sitsmamba {

struct ModelConfig {
  std::size_t input_channels = 10;
  std::size_t num_classes = 20;
  std::size_t hidden = 128;  // also the Mamba d_model
  MambaConfig mamba;
  LossConfig loss;
  TemporalMode mode = TemporalMode::Pad;

  /// Throws std::invalid_argument; syncs mamba.d_model to hidden.
  void validate();
};

template <typename T>
struct ModelOutput {
  Tensor<T> class_logits;    // [N, K, H, W]
  Tensor<T> reconstruction;  // [N, L, C, H, W]; undefined when not requested
  Tensor<T> encoded;         // [N, H*W, L, C1], detached
};

struct ParameterCount {
  std::size_t spatial = 0;
  std::size_t temporal = 0;
  std::size_t cls_head = 0;
  std::size_t rbranch = 0;
  std::size_t total = 0;
};

/// encoded [P, L, C1] -> [P, C1], maximum over steps with valid[p * L + t] set.
template <typename T>
Tensor<T> temporal_maxpool(const Tensor<T>& encoded, std::span<const std::uint8_t> valid);

/// encoded [P, L, C1] -> [P, L, C] with one affine map shared by all steps.
template <typename T>
Tensor<T> rbranch_decode(const Linear<T>& rbranch, const Tensor<T>& encoded);

template <typename T>
class SitsMamba {
 public:
  static SitsMamba init(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  /// x [N, T, C, H, W]; valid_length per sample. Training mode uses batch
  /// statistics in batchnorm (valid frames only) and updates running ones.
  ModelOutput<T> forward(const Tensor<T>& x, const std::vector<std::size_t>& valid_length, bool training,
                         bool with_reconstruction);
  ModelOutput<T> forward(const SitsBatch& batch, bool training, bool with_reconstruction);

  /// Inference-mode per-pixel argmax over classes, lowest index on ties.
  /// Labels [N, H, W].
  std::vector<std::uint16_t> predict(const SitsBatch& batch);

  /// Every tensor that belongs in a checkpoint, including batchnorm
  /// running statistics (non-trainable). Reconstruction-branch entries
  /// are prefixed "rbranch.".
  ParamList<T> parameters();
  ParameterCount count();

  ConvBlock<T> spatial;
  MambaBlock<T> temporal;
  ClsHead<T> head;
  Linear<T> rbranch;

 private:
  ModelConfig config_;
};

/// Trainable scalar count of a freshly built model.
ParameterCount count_parameters(ModelConfig config);

/// Batch series as a tensor [N, T, C, H, W].
template <typename T>
Tensor<T> batch_tensor(const SitsBatch& batch);

/// Argmax over axis 1 of logits [N, K, H, W], lowest index on ties.
template <typename T>
std::vector<std::uint16_t> argmax_labels(const Tensor<T>& logits);

}  // namespace sitsmamba
