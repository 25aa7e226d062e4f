#pragma once

// Frame-wise convolutional encoder and the classification head.

#include "sitsmamba/nn.hpp"

namespace sitsmamba {

/// conv3x3 -> BN -> ReLU, twice: in_channels -> hidden -> hidden.
template <typename T>
struct ConvBlock {
  std::size_t in_channels = 0;
  std::size_t hidden = 0;
  Conv2d<T> conv1, conv2;
  BatchNorm<T> bn1, bn2;

  static ConvBlock init(std::size_t in_channels, std::size_t hidden, Rng& rng);
  /// frames [F, in_channels, H, W] -> [F, hidden, H, W].
  Tensor<T> operator()(const Tensor<T>& frames, bool training);
  void collect(const std::string& prefix, ParamList<T>& out);
};

/// conv3x3 hidden -> classes, then BN and ReLU.
template <typename T>
struct ClsHead {
  std::size_t hidden = 0;
  std::size_t classes = 0;
  Conv2d<T> conv;
  BatchNorm<T> bn;

  static ClsHead init(std::size_t hidden, std::size_t classes, Rng& rng);
  /// [N, hidden, H, W] -> [N, classes, H, W].
  Tensor<T> operator()(const Tensor<T>& x, bool training);
  void collect(const std::string& prefix, ParamList<T>& out);
};

}  // namespace sitsmamba
