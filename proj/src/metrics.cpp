#include "sitsmamba/metrics.hpp"

#include <iomanip>
#include <ostream>
#include <stdexcept>

namespace sitsmamba {

ConfusionMatrix::ConfusionMatrix(std::size_t classes, std::set<std::size_t> eval_classes)
    : k_(classes), eval_(std::move(eval_classes)), counts_(classes * classes, 0) {
  if (classes == 0) throw std::invalid_argument("confusion matrix: zero classes");
  for (auto c : eval_) {
    if (c >= k_) throw std::invalid_argument("confusion matrix: eval class " + std::to_string(c) + " out of range");
  }
  if (eval_.empty()) {
    for (std::size_t c = 0; c < k_; ++c) eval_.insert(c);
  }
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t s = 0;
  for (auto v : counts_) s += v;
  return s;
}

void ConfusionMatrix::add(std::size_t truth, std::size_t pred, std::uint64_t count) {
  if (truth >= k_ || pred >= k_) {
    throw std::invalid_argument("confusion matrix: class (" + std::to_string(truth) + ", " + std::to_string(pred) +
                                ") out of range for K=" + std::to_string(k_));
  }
  counts_[truth * k_ + pred] += count;
}

void ConfusionMatrix::accumulate(std::span<const std::uint16_t> labels, std::span<const std::uint16_t> predictions,
                                 const std::set<std::size_t>& ignore_labels) {
  if (labels.size() != predictions.size()) throw std::invalid_argument("accumulate: labels/predictions size differ");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (ignore_labels.count(labels[i])) continue;
    add(labels[i], predictions[i]);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw std::invalid_argument("merge: class counts differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

Scores ConfusionMatrix::scores() const {
  const std::uint64_t n = total();
  if (n == 0) throw std::invalid_argument("scores: no scored pixels");
  Scores s;
  std::uint64_t trace = 0;
  s.iou.assign(k_, 0.0);
  s.f1.assign(k_, 0.0);
  s.present.assign(k_, false);
  for (std::size_t c = 0; c < k_; ++c) {
    const std::uint64_t tp = at(c, c);
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k_; ++j) {
      row += at(c, j);
      col += at(j, c);
    }
    trace += tp;
    const std::uint64_t fp = col - tp, fn = row - tp;
    if (tp + fp + fn == 0) continue;
    s.present[c] = true;
    s.iou[c] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    s.f1[c] = static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
  }
  s.oa = static_cast<double>(trace) / static_cast<double>(n);
  for (auto c : eval_) {
    if (!s.present[c]) continue;
    s.miou += s.iou[c];
    s.mf1 += s.f1[c];
    ++s.averaged_classes;
  }
  if (s.averaged_classes) {
    s.miou /= static_cast<double>(s.averaged_classes);
    s.mf1 /= static_cast<double>(s.averaged_classes);
  }
  return s;
}

namespace {

std::string class_name(const std::vector<std::string>& names, std::size_t k) {
  return k < names.size() ? names[k] : std::to_string(k);
}

}  // namespace

void write_scores_csv(std::ostream& os, const Scores& s, const std::vector<std::string>& names) {
  os << "class,iou,f1,present\n" << std::setprecision(9);
  for (std::size_t k = 0; k < s.iou.size(); ++k) {
    os << class_name(names, k) << ',' << s.iou[k] << ',' << s.f1[k] << ',' << (s.present[k] ? 1 : 0) << '\n';
  }
  os << "OA,," << s.oa << ",\n";
  os << "mIoU,," << s.miou << ",\n";
  os << "mF1,," << s.mf1 << ",\n";
}

void print_scores(std::ostream& os, const Scores& s, const std::vector<std::string>& names) {
  os << std::fixed << std::setprecision(4);
  os << std::setw(10) << "class" << std::setw(10) << "IoU" << std::setw(10) << "F1" << '\n';
  for (std::size_t k = 0; k < s.iou.size(); ++k) {
    os << std::setw(10) << class_name(names, k);
    if (s.present[k]) {
      os << std::setw(10) << s.iou[k] << std::setw(10) << s.f1[k] << '\n';
    } else {
      os << std::setw(20) << "absent" << '\n';
    }
  }
  os << "OA " << s.oa << "  mIoU " << s.miou << "  mF1 " << s.mf1 << "  (" << s.averaged_classes << " classes)\n";
  os.unsetf(std::ios::floatfield);
}

}  // namespace sitsmamba
