#include "sitsmamba/model.hpp"

#include <stdexcept>

namespace sitsmamba {

void ModelConfig::validate() {
  if (input_channels == 0 || num_classes < 2 || hidden == 0) {
    throw std::invalid_argument("model config: need input_channels >= 1, num_classes >= 2, hidden >= 1");
  }
  if (num_classes > 65535) throw std::invalid_argument("model config: num_classes must fit in 16 bits");
  if (loss.w0 < 0) throw std::invalid_argument("model config: w0 must be >= 0");
  for (auto l : loss.ignore_labels) {
    if (l >= num_classes) throw std::invalid_argument("model config: ignore label out of range");
  }
  if (mamba.d_state == 0 || mamba.expand == 0 || mamba.d_conv == 0) {
    throw std::invalid_argument("model config: Mamba extents must be positive");
  }
  mamba.d_model = hidden;
}

template <typename T>
Tensor<T> temporal_maxpool(const Tensor<T>& encoded, std::span<const std::uint8_t> valid) {
  if (encoded.rank() != 3) throw ShapeError("temporal_maxpool: expected [P, L, C1], got " + to_string(encoded.shape()));
  return masked_max_over_axis(encoded, 1, valid);
}

template <typename T>
Tensor<T> rbranch_decode(const Linear<T>& rbranch, const Tensor<T>& encoded) {
  if (encoded.rank() != 3) throw ShapeError("rbranch_decode: expected [P, L, C1], got " + to_string(encoded.shape()));
  return rbranch(encoded);
}

template <typename T>
SitsMamba<T> SitsMamba<T>::init(ModelConfig config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  SitsMamba m;
  m.config_ = config;
  m.spatial = ConvBlock<T>::init(config.input_channels, config.hidden, rng);
  m.temporal = MambaBlock<T>::init(config.mamba, rng);
  m.head = ClsHead<T>::init(config.hidden, config.num_classes, rng);
  m.rbranch = Linear<T>::init(config.hidden, config.input_channels, true, rng);
  return m;
}

template <typename T>
ModelOutput<T> SitsMamba<T>::forward(const Tensor<T>& x, const std::vector<std::size_t>& valid_length, bool training,
                                     bool with_reconstruction) {
  if (x.rank() != 5 || x.shape()[2] != config_.input_channels) {
    throw ShapeError("forward: expected [N, T, " + std::to_string(config_.input_channels) + ", H, W], got " +
                     to_string(x.shape()));
  }
  const std::size_t n = x.shape()[0], len = x.shape()[1], h = x.shape()[3], w = x.shape()[4];
  const std::size_t c1 = config_.hidden, hw = h * w;
  if (valid_length.size() != n) throw ShapeError("forward: one valid length per sample required");
  bool all_valid = true;
  for (auto lv : valid_length) {
    if (lv == 0 || lv > len) throw std::invalid_argument("forward: valid length outside [1, T]");
    all_valid = all_valid && lv == len;
  }

  // Spatial encoder over observed frames only; padded frames get zeros.
  const auto frames = reshape(x, Shape{n * len, config_.input_channels, h, w});
  Tensor<T> s;
  if (all_valid) {
    s = spatial(frames, training);
  } else {
    std::vector<Tensor<T>> parts;
    for (std::size_t i = 0; i < n; ++i) parts.push_back(slice(frames, 0, i * len, valid_length[i]));
    const auto encoded_frames = spatial(concat(parts, 0), training);
    std::vector<Tensor<T>> padded;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < n; ++i) {
      padded.push_back(slice(encoded_frames, 0, offset, valid_length[i]));
      offset += valid_length[i];
      if (valid_length[i] < len) padded.push_back(Tensor<T>::zeros({len - valid_length[i], c1, h, w}));
    }
    s = concat(padded, 0);
  }

  // One sequence per pixel: [N, T, C1, H, W] -> [N*H*W, T, C1].
  const auto seq = reshape(permute(reshape(s, Shape{n, len, c1, h, w}), {0, 3, 4, 1, 2}), Shape{n * hw, len, c1});
  const auto enc = temporal(seq);

  std::vector<std::uint8_t> mask(n * hw * len, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < hw; ++p) {
      std::fill_n(mask.begin() + (i * hw + p) * len, valid_length[i], std::uint8_t{1});
    }
  }
  const auto pooled = temporal_maxpool(enc, mask);
  const auto feat = permute(reshape(pooled, Shape{n, h, w, c1}), {0, 3, 1, 2});

  ModelOutput<T> out;
  out.class_logits = head(feat, training);
  if (with_reconstruction) {
    const auto rec = rbranch_decode(rbranch, enc);
    out.reconstruction =
        permute(reshape(rec, Shape{n, h, w, len, config_.input_channels}), {0, 3, 4, 1, 2});
  }
  {
    NoGradGuard guard;
    out.encoded = reshape(enc.detach(), Shape{n, hw, len, c1});
  }
  return out;
}

template <typename T>
Tensor<T> batch_tensor(const SitsBatch& batch) {
  std::vector<T> v(batch.series.begin(), batch.series.end());
  return Tensor<T>({batch.n, batch.t, batch.c, batch.h, batch.w}, std::move(v));
}

template <typename T>
ModelOutput<T> SitsMamba<T>::forward(const SitsBatch& batch, bool training, bool with_reconstruction) {
  return forward(batch_tensor<T>(batch), batch.valid_length, training, with_reconstruction);
}

template <typename T>
std::vector<std::uint16_t> argmax_labels(const Tensor<T>& logits) {
  if (logits.rank() != 4) throw ShapeError("argmax: logits must be [N, K, H, W]");
  const std::size_t n = logits.shape()[0], k = logits.shape()[1], hw = logits.shape()[2] * logits.shape()[3];
  const auto& v = logits.values();
  std::vector<std::uint16_t> out(n * hw);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c) {
        if (v[(b * k + c) * hw + p] > v[(b * k + best) * hw + p]) best = c;
      }
      out[b * hw + p] = static_cast<std::uint16_t>(best);
    }
  }
  return out;
}

template <typename T>
std::vector<std::uint16_t> SitsMamba<T>::predict(const SitsBatch& batch) {
  NoGradGuard guard;
  return argmax_labels(forward(batch, false, false).class_logits);
}

template <typename T>
ParamList<T> SitsMamba<T>::parameters() {
  ParamList<T> out;
  spatial.collect("spatial", out);
  temporal.collect("temporal", out);
  head.collect("head", out);
  rbranch.collect("rbranch", out);
  return out;
}

template <typename T>
ParameterCount SitsMamba<T>::count() {
  ParameterCount c;
  ParamList<T> p;
  spatial.collect("spatial", p);
  c.spatial = count_trainable(p);
  p.clear();
  temporal.collect("temporal", p);
  c.temporal = count_trainable(p);
  p.clear();
  head.collect("head", p);
  c.cls_head = count_trainable(p);
  p.clear();
  rbranch.collect("rbranch", p);
  c.rbranch = count_trainable(p);
  c.total = c.spatial + c.temporal + c.cls_head + c.rbranch;
  return c;
}

ParameterCount count_parameters(ModelConfig config) { return SitsMamba<float>::init(std::move(config), 0).count(); }

#define SITSMAMBA_INSTANTIATE_MODEL(T)                                                            \
  template class SitsMamba<T>;                                                                    \
  template Tensor<T> temporal_maxpool(const Tensor<T>&, std::span<const std::uint8_t>);           \
  template Tensor<T> rbranch_decode(const Linear<T>&, const Tensor<T>&);                          \
  template Tensor<T> batch_tensor<T>(const SitsBatch&);                                           \
  template std::vector<std::uint16_t> argmax_labels(const Tensor<T>&);

SITSMAMBA_INSTANTIATE_MODEL(float)
SITSMAMBA_INSTANTIATE_MODEL(double)

}  // namespace sitsmamba
