#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <vector>

#include "densipl/error.hpp"
#include "densipl/label_map.hpp"

namespace densipl {

struct MiouResult {
  double miou = 0.0;
  /// Mean IoU over the rare classes that occur in gt or pred; 0 if none occur.
  double r_miou = 0.0;
  /// IoU per class; empty for classes absent from both gt and pred.
  std::vector<std::optional<double>> class_iou;
};

/// Pixel-level confusion counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {}

  void add(const LabelMap& pred, const LabelMap& gt) {
    if (pred.height() != gt.height() || pred.width() != gt.width()) fail_input("shape mismatch between pred and gt");
    if (pred.num_classes() != k_ || gt.num_classes() != k_) fail_input("class count mismatch in confusion matrix");
    for (std::size_t i = 0; i < gt.pixels(); ++i) {
      if (!pred.is_hard(i) || !gt.is_hard(i)) fail_input("mIoU needs all-Hard prediction and ground truth");
      ++counts_[gt.hard_class(i) * k_ + pred.hard_class(i)];
    }
  }

  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * k_ + pred]; }

  MiouResult result(const std::set<std::size_t>& rare_classes) const {
    MiouResult r;
    r.class_iou.resize(k_);
    double sum = 0.0, rare_sum = 0.0;
    std::size_t present = 0, rare_present = 0;
    for (std::size_t c = 0; c < k_; ++c) {
      std::uint64_t tp = at(c, c), fp = 0, fn = 0;
      for (std::size_t o = 0; o < k_; ++o) {
        if (o == c) continue;
        fp += at(o, c);
        fn += at(c, o);
      }
      const std::uint64_t denom = tp + fp + fn;
      if (denom == 0) continue;
      const double iou = static_cast<double>(tp) / static_cast<double>(denom);
      r.class_iou[c] = iou;
      sum += iou;
      ++present;
      if (rare_classes.count(c)) {
        rare_sum += iou;
        ++rare_present;
      }
    }
    r.miou = present ? sum / static_cast<double>(present) : 0.0;
    r.r_miou = rare_present ? rare_sum / static_cast<double>(rare_present) : 0.0;
    return r;
  }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

inline MiouResult evaluate_miou(const LabelMap& pred, const LabelMap& gt, const std::set<std::size_t>& rare_classes) {
  ConfusionMatrix cm(gt.num_classes());
  cm.add(pred, gt);
  return cm.result(rare_classes);
}

/// All-Hard map of per-pixel argmax, the form evaluate_miou expects.
template <class T>
LabelMap argmax_labels(const Grid<T>& probs) {
  LabelMap out(probs.height, probs.width, probs.channels);
  for (std::size_t i = 0; i < probs.pixels(); ++i) out.set_hard(i, argmax_lowest(probs.pixel(i)));
  return out;
}

}  // namespace densipl
