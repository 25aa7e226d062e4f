#include "sitsmamba/losses.hpp"

#include <iomanip>
#include <iostream>
#include <ostream>

#include "sitsmamba/ops.hpp"

namespace sitsmamba {

namespace {

std::function<void(const std::string&)>& log_sink() {
  static std::function<void(const std::string&)> sink = [](const std::string& m) { std::cerr << m << '\n'; };
  return sink;
}

}  // namespace

void set_loss_log(std::function<void(const std::string&)> sink) { log_sink() = std::move(sink); }

std::vector<double> positional_weights(std::size_t length) {
  if (length == 0) throw std::invalid_argument("positional_weights: length must be >= 1");
  std::vector<double> w(length);
  for (std::size_t t = 0; t < length; ++t) w[t] = static_cast<double>(t + 1) / static_cast<double>(length);
  return w;
}

template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& x, const Tensor<T>& x_hat, const std::vector<std::size_t>& valid_length,
                              bool use_pw) {
  if (x.shape() != x_hat.shape() || x.rank() != 5) {
    throw ShapeError("reconstruction_loss: expected equal [N, T, C, H, W] shapes, got " + to_string(x.shape()) +
                     " and " + to_string(x_hat.shape()));
  }
  const std::size_t n = x.shape()[0], len = x.shape()[1];
  if (valid_length.size() != n) throw ShapeError("reconstruction_loss: one valid length per sample required");
  const double per_step = static_cast<double>(x.shape()[2] * x.shape()[3] * x.shape()[4]);
  std::vector<T> w(n * len, T{0});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lv = valid_length[i];
    if (lv == 0 || lv > len) throw std::invalid_argument("reconstruction_loss: sample with no valid step");
    const auto pw = positional_weights(lv);
    for (std::size_t t = 0; t < lv; ++t) {
      w[i * len + t] = static_cast<T>((use_pw ? pw[t] : 1.0) / (per_step * static_cast<double>(n)));
    }
  }
  const Tensor<T> weights({n, len, 1, 1, 1}, std::move(w));
  const auto diff = sub(x_hat, x);
  return sum(mul(mul(diff, diff), weights));
}

template <typename T>
Tensor<T> classification_loss(const Tensor<T>& logits, const std::vector<std::uint16_t>& labels,
                              const std::set<std::size_t>& ignore_labels) {
  if (logits.rank() != 4) throw ShapeError("classification_loss: logits must be [N, K, H, W]");
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  const std::size_t hw = logits.shape()[2] * logits.shape()[3];
  if (labels.size() != n * hw) {
    throw ShapeError("classification_loss: " + std::to_string(labels.size()) + " labels for logits " +
                     to_string(logits.shape()));
  }
  std::size_t counted = 0;
  for (auto l : labels) {
    if (ignore_labels.count(l)) continue;
    if (l >= k) throw std::invalid_argument("classification_loss: label " + std::to_string(l) + " out of range");
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("classification_loss: every pixel is ignored");
  std::vector<T> sel(logits.numel(), T{0});
  const T coef = T(-1) / static_cast<T>(counted);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      const auto l = labels[b * hw + p];
      if (!ignore_labels.count(l)) sel[(b * k + l) * hw + p] = coef;
    }
  }
  return sum(mul(log_softmax(logits, 1), Tensor<T>(logits.shape(), std::move(sel))));
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& l_cls, const Tensor<T>& l_tp, const LossConfig& config,
                        LossReport* report) {
  if (config.w0 < 0) throw std::invalid_argument("combined_loss: w0 must be >= 0");
  LossReport r;
  r.l_cls = static_cast<double>(l_cls.item());
  Tensor<T> total = l_cls;
  if (l_tp.defined()) {
    r.l_tp = static_cast<double>(l_tp.item());
    r.w1 = 1.0;
    if (config.use_w1) {
      double denom = r.l_tp;
      if (denom == 0.0) {
        denom += kW1Epsilon;
        log_sink()("combined_loss: reconstruction loss is 0, w1 computed with l_tp + 1e-8");
      }
      r.w1 = r.l_cls / denom;
    }
    total = add(l_cls, scale(l_tp, static_cast<T>(config.w0 * r.w1)));
  }
  r.total = static_cast<double>(total.item());
  if (report) *report = r;
  return total;
}

void write_loss_header(std::ostream& os) { os << "epoch,step,l_cls,l_tp,w1,total\n"; }

void write_loss_row(std::ostream& os, std::size_t epoch, std::size_t step, const LossReport& r) {
  os << epoch << ',' << step << std::setprecision(9) << ',' << r.l_cls << ',' << r.l_tp << ',' << r.w1 << ','
     << r.total << '\n';
}

#define SITSMAMBA_INSTANTIATE_LOSSES(T)                                                                   \
  template Tensor<T> reconstruction_loss(const Tensor<T>&, const Tensor<T>&, const std::vector<std::size_t>&, \
                                         bool);                                                           \
  template Tensor<T> classification_loss(const Tensor<T>&, const std::vector<std::uint16_t>&,             \
                                         const std::set<std::size_t>&);                                   \
  template Tensor<T> combined_loss(const Tensor<T>&, const Tensor<T>&, const LossConfig&, LossReport*);

SITSMAMBA_INSTANTIATE_LOSSES(float)
SITSMAMBA_INSTANTIATE_LOSSES(double)

}  // namespace sitsmamba
