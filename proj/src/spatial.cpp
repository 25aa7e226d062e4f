#include "sitsmamba/spatial.hpp"

namespace sitsmamba {

namespace {

void require_channels(const char* what, const Shape& shape, std::size_t channels) {
  if (shape.size() != 4 || shape[1] != channels) {
    throw ShapeError(std::string(what) + ": expected [N, " + std::to_string(channels) + ", H, W], got " +
                     to_string(shape));
  }
}

}  // namespace

template <typename T>
ConvBlock<T> ConvBlock<T>::init(std::size_t in_channels, std::size_t hidden, Rng& rng) {
  ConvBlock b;
  b.in_channels = in_channels;
  b.hidden = hidden;
  b.conv1 = Conv2d<T>::init(in_channels, hidden, 3, rng);
  b.bn1 = BatchNorm<T>::init(hidden);
  b.conv2 = Conv2d<T>::init(hidden, hidden, 3, rng);
  b.bn2 = BatchNorm<T>::init(hidden);
  return b;
}

template <typename T>
Tensor<T> ConvBlock<T>::operator()(const Tensor<T>& frames, bool training) {
  require_channels("convblock", frames.shape(), in_channels);
  auto h = relu(bn1(conv1(frames), training));
  return relu(bn2(conv2(h), training));
}

template <typename T>
void ConvBlock<T>::collect(const std::string& prefix, ParamList<T>& out) {
  conv1.collect(prefix + ".conv1", out);
  bn1.collect(prefix + ".bn1", out);
  conv2.collect(prefix + ".conv2", out);
  bn2.collect(prefix + ".bn2", out);
}

template <typename T>
ClsHead<T> ClsHead<T>::init(std::size_t hidden, std::size_t classes, Rng& rng) {
  ClsHead h;
  h.hidden = hidden;
  h.classes = classes;
  h.conv = Conv2d<T>::init(hidden, classes, 3, rng);
  h.bn = BatchNorm<T>::init(classes);
  return h;
}

template <typename T>
Tensor<T> ClsHead<T>::operator()(const Tensor<T>& x, bool training) {
  require_channels("cls_head", x.shape(), hidden);
  return relu(bn(conv(x), training));
}

template <typename T>
void ClsHead<T>::collect(const std::string& prefix, ParamList<T>& out) {
  conv.collect(prefix + ".conv", out);
  bn.collect(prefix + ".bn", out);
}

template struct ConvBlock<float>;
template struct ConvBlock<double>;
template struct ClsHead<float>;
template struct ClsHead<double>;

}  // namespace sitsmamba
