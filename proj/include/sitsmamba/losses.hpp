#pragma once

// Classification cross-entropy, positionally weighted reconstruction loss
// and their w0 / w1 balanced combination.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <set>
#include <string>
#include <vector>

#include "sitsmamba/tensor.hpp"

namespace sitsmamba {

struct LossConfig {
  double w0 = 0.03;
  bool use_pw = true;
  bool use_w1 = true;
  bool use_rbranch = true;
  std::set<std::size_t> ignore_labels;
};

struct LossReport {
  double l_cls = 0;
  double l_tp = 0;
  double w1 = 0;
  double total = 0;
};

/// w_t = (t + 1) / L.
std::vector<double> positional_weights(std::size_t length);

/// x, x_hat [N, T, C, H, W]. Squared error averaged over channels and
/// pixels, weighted per step (positional weights over each sample's own
/// valid length, or 1), summed over valid steps, averaged over samples.
template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& x, const Tensor<T>& x_hat, const std::vector<std::size_t>& valid_length,
                              bool use_pw);

/// logits [N, K, H, W], labels N*H*W. Mean negative log-likelihood over
/// pixels whose label is not ignored.
template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, const std::vector<std::uint16_t>& labels,
                              const std::set<std::size_t>& ignore_labels);

inline constexpr double kW1Epsilon = 1e-8;

/// total = l_cls + w0 * w1 * l_tp, with w1 = l_cls / l_tp held constant
/// (no gradient) when use_w1, else 1. An undefined l_tp (reconstruction
/// branch off) gives total = l_cls.
template <typename T>
Tensor<T> combined_loss(const Tensor<T>& l_cls, const Tensor<T>& l_tp, const LossConfig& config,
                        LossReport* report = nullptr);

/// Receives notices such as the l_tp == 0 clamp. Defaults to stderr.
void set_loss_log(std::function<void(const std::string&)> sink);

void write_loss_header(std::ostream& os);
void write_loss_row(std::ostream& os, std::size_t epoch, std::size_t step, const LossReport& r);

}  // namespace sitsmamba
