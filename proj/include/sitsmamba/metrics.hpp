#pragma once

// Confusion matrix and the OA / IoU / F1 / mIoU / mF1 scores.

#include <cstdint>
#include <iosfwd>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace sitsmamba {

struct Scores {
  double oa = 0;
  std::vector<double> iou;
  std::vector<double> f1;
  std::vector<bool> present;  // TP + FP + FN > 0
  double miou = 0;
  double mf1 = 0;
  std::size_t averaged_classes = 0;
};

/// Rows are true classes, columns predictions.
class ConfusionMatrix {
 public:
  /// An empty eval set means every class.
  explicit ConfusionMatrix(std::size_t classes, std::set<std::size_t> eval_classes = {});

  std::size_t classes() const { return k_; }
  const std::set<std::size_t>& eval_classes() const { return eval_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }
  std::uint64_t total() const;
  const std::vector<std::uint64_t>& counts() const { return counts_; }

  /// Each pixel whose label is not ignored adds one to cm[label][pred].
  void accumulate(std::span<const std::uint16_t> labels, std::span<const std::uint16_t> predictions,
                  const std::set<std::size_t>& ignore_labels = {});
  void add(std::size_t truth, std::size_t pred, std::uint64_t count = 1);
  void merge(const ConfusionMatrix& other);

  Scores scores() const;

 private:
  std::size_t k_;
  std::set<std::size_t> eval_;
  std::vector<std::uint64_t> counts_;
};

/// Per-class rows then summary rows.
void write_scores_csv(std::ostream& os, const Scores& s, const std::vector<std::string>& names = {});
void print_scores(std::ostream& os, const Scores& s, const std::vector<std::string>& names = {});

}  // namespace sitsmamba
