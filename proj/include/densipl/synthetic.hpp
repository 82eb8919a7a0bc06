#pragma once

// Seeded two-domain pixel classification data.
//
// Each image carries a spatially smooth class field: K independent noise
// fields are box-blurred and the per-pixel argmax of (field + bias) picks the
// class, with the biases fitted so the class frequencies follow `balance`.
// A pixel's feature is its class prototype plus Gaussian noise; target
// features additionally go through x -> (I + shift R) x + shift t.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "densipl/error.hpp"
#include "densipl/label_map.hpp"
#include "densipl/metrics.hpp"
#include "densipl/tensor.hpp"

namespace densipl {

struct SyntheticDatasetConfig {
  std::size_t images_per_domain = 16;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 4;
  std::size_t feature_dim = 8;
  double shift = 1.0;
  std::vector<double> balance = {0.45, 0.3, 0.2, 0.05};
  std::size_t smoothing_radius = 4;
  double noise = 1.0;
  /// Per-image prototype contrast is 1 + contrast_jitter * u, u ~ U(-1, 1),
  /// so images within a domain differ in difficulty.
  double contrast_jitter = 0.0;
  double prototype_scale = 1.0;
  /// Classes with balance at or below this are reported as rare.
  double rare_balance = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) fail_input("synthetic data needs K >= 2");
    if (feature_dim < num_classes) fail_input("synthetic data needs feature_dim >= K");
    if (images_per_domain == 0 || height == 0 || width == 0) fail_input("synthetic data needs at least one pixel");
    if (!(shift >= 0.0)) fail_input("shift must be >= 0");
    if (!(noise >= 0.0)) fail_input("noise must be >= 0");
    if (!(contrast_jitter >= 0.0 && contrast_jitter <= 1.0)) fail_input("contrast_jitter must be in [0, 1]");
    if (balance.size() != num_classes) fail_input("balance must have K entries");
    double sum = 0.0;
    for (double b : balance) {
      if (!(b > 0.0)) fail_input("balance entries must be positive");
      sum += b;
    }
    if (std::abs(sum - 1.0) > 1e-6) fail_input("balance must sum to 1");
  }

  std::set<std::size_t> rare_classes() const {
    std::set<std::size_t> r;
    for (std::size_t k = 0; k < balance.size(); ++k) {
      if (balance[k] <= rare_balance) r.insert(k);
    }
    return r;
  }
};

struct SourceImage {
  std::string id;
  Grid<double> features;  // H x W x F
  LabelMap labels;        // all Hard
};

struct TargetImage {
  std::string id;
  Grid<double> features;
};

/// Ground truth of the target domain. Only an Evaluator can read it.
class TargetGroundTruth {
 public:
  TargetGroundTruth() = default;
  explicit TargetGroundTruth(std::vector<LabelMap> labels) : labels_(std::move(labels)) {}
  std::size_t size() const { return labels_.size(); }

 private:
  friend class Evaluator;
  std::vector<LabelMap> labels_;
};

/// Scores predictions and pseudo labels against held-out target ground truth.
class Evaluator {
 public:
  Evaluator(TargetGroundTruth truth, std::size_t num_classes, std::set<std::size_t> rare)
      : truth_(std::move(truth)), k_(num_classes), rare_(std::move(rare)) {}

  /// Dataset-level mIoU / R-mIoU of all-Hard predictions, one per target image.
  MiouResult evaluate(const std::vector<LabelMap>& predictions) const {
    if (predictions.size() != truth_.labels_.size()) fail_input("prediction count does not match target set");
    ConfusionMatrix cm(k_);
    for (std::size_t i = 0; i < predictions.size(); ++i) cm.add(predictions[i], truth_.labels_[i]);
    return cm.result(rare_);
  }

  /// Fraction of labeled pixels whose label (argmax for Soft) matches ground
  /// truth; 0 when nothing is labeled.
  double pseudo_label_accuracy(std::size_t image, const LabelMap& labels) const {
    const LabelMap& gt = truth_.labels_.at(image);
    std::size_t labeled = 0, correct = 0;
    for (std::size_t i = 0; i < labels.pixels(); ++i) {
      std::size_t cls = 0;
      switch (labels.kind(i)) {
        case LabelKind::unlabeled: continue;
        case LabelKind::hard: cls = labels.hard_class(i); break;
        case LabelKind::soft: cls = argmax_lowest(labels.soft(i)); break;
      }
      ++labeled;
      correct += cls == gt.hard_class(i);
    }
    return labeled ? static_cast<double>(correct) / static_cast<double>(labeled) : 0.0;
  }

  const std::set<std::size_t>& rare_classes() const { return rare_; }

 private:
  TargetGroundTruth truth_;
  std::size_t k_;
  std::set<std::size_t> rare_;
};

struct SyntheticDomains {
  std::size_t num_classes = 0;
  std::size_t feature_dim = 0;
  std::vector<SourceImage> source;
  std::vector<TargetImage> target;
  TargetGroundTruth target_truth;
  std::set<std::size_t> rare_classes;
};

namespace detail {

/// Box blur with clipped borders (mean over the in-bounds window).
inline std::vector<double> box_blur(const std::vector<double>& in, std::size_t h, std::size_t w, std::size_t r) {
  std::vector<double> integral((h + 1) * (w + 1), 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    double row = 0.0;
    for (std::size_t x = 0; x < w; ++x) {
      row += in[y * w + x];
      integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
    }
  }
  std::vector<double> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t y0 = y >= r ? y - r : 0, y1 = std::min(h - 1, y + r);
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t x0 = x >= r ? x - r : 0, x1 = std::min(w - 1, x + r);
      const double s = integral[(y1 + 1) * (w + 1) + x1 + 1] - integral[y0 * (w + 1) + x1 + 1] -
                       integral[(y1 + 1) * (w + 1) + x0] + integral[y0 * (w + 1) + x0];
      out[y * w + x] = s / static_cast<double>((y1 - y0 + 1) * (x1 - x0 + 1));
    }
  }
  return out;
}

/// K standardized smooth fields per image, stored H x W x K.
inline std::vector<std::vector<double>> smooth_fields(const SyntheticDatasetConfig& cfg, std::mt19937_64& rng) {
  const std::size_t h = cfg.height, w = cfg.width, kk = cfg.num_classes;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> images(cfg.images_per_domain, std::vector<double>(h * w * kk));
  std::vector<double> noise(h * w);
  for (auto& img : images) {
    for (std::size_t k = 0; k < kk; ++k) {
      for (auto& v : noise) v = normal(rng);
      auto blurred = box_blur(noise, h, w, cfg.smoothing_radius);
      const double mean = std::accumulate(blurred.begin(), blurred.end(), 0.0) / static_cast<double>(h * w);
      double var = 0.0;
      for (double v : blurred) var += (v - mean) * (v - mean);
      const double sd = std::sqrt(var / static_cast<double>(h * w)) + 1e-12;
      for (std::size_t i = 0; i < h * w; ++i) img[i * kk + k] = (blurred[i] - mean) / sd;
    }
  }
  return images;
}

/// Per-class biases so that argmax(field + bias) matches the balance vector.
inline std::vector<double> fit_class_bias(const std::vector<std::vector<double>>& fields, const std::vector<double>& balance) {
  const std::size_t kk = balance.size();
  std::vector<double> bias(kk, 0.0);
  for (std::size_t k = 0; k < kk; ++k) bias[k] = std::log(balance[k]);
  std::vector<double> counts(kk);
  for (int iter = 0; iter < 300; ++iter) {
    std::fill(counts.begin(), counts.end(), 0.0);
    double total = 0.0;
    for (const auto& img : fields) {
      for (std::size_t i = 0; i < img.size() / kk; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < kk; ++k) {
          if (img[i * kk + k] + bias[k] > img[i * kk + best] + bias[best]) best = k;
        }
        counts[best] += 1.0;
        total += 1.0;
      }
    }
    double worst = 0.0;
    for (std::size_t k = 0; k < kk; ++k) {
      const double freq = counts[k] / total;
      worst = std::max(worst, std::abs(freq - balance[k]));
      bias[k] += 0.5 * (std::log(balance[k]) - std::log(std::max(freq, 1e-6)));
    }
    if (worst < 1e-3) break;
  }
  return bias;
}

inline LabelMap field_labels(const std::vector<double>& field, const std::vector<double>& bias, std::size_t h,
                             std::size_t w) {
  const std::size_t kk = bias.size();
  LabelMap labels(h, w, kk);
  for (std::size_t i = 0; i < h * w; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < kk; ++k) {
      if (field[i * kk + k] + bias[k] > field[i * kk + best] + bias[best]) best = k;
    }
    labels.set_hard(i, best);
  }
  return labels;
}

}  // namespace detail

/// Builds a labeled source domain and an unlabeled, shifted target domain.
/// Fully determined by cfg (including cfg.seed).
inline SyntheticDomains make_synthetic_domains(const SyntheticDatasetConfig& cfg) {
  cfg.validate();
  const std::size_t h = cfg.height, w = cfg.width, kk = cfg.num_classes, f = cfg.feature_dim;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);

  std::vector<double> prototypes(kk * f);
  for (auto& v : prototypes) v = cfg.prototype_scale * normal(rng);

  // Target transform: A = I + shift * R / sqrt(F), offset = shift * t.
  std::vector<double> transform(f * f), offset(f);
  for (std::size_t r = 0; r < f; ++r) {
    for (std::size_t c = 0; c < f; ++c) {
      transform[r * f + c] = (r == c ? 1.0 : 0.0) + cfg.shift * normal(rng) / std::sqrt(static_cast<double>(f));
    }
  }
  for (auto& v : offset) v = cfg.shift * cfg.prototype_scale * normal(rng);

  SyntheticDomains d;
  d.num_classes = kk;
  d.feature_dim = f;
  d.rare_classes = cfg.rare_classes();

  auto make_domain = [&](bool shifted, std::vector<LabelMap>& labels_out, std::vector<Grid<double>>& features_out) {
    const auto fields = detail::smooth_fields(cfg, rng);
    const auto bias = detail::fit_class_bias(fields, cfg.balance);
    std::vector<double> x(f), y(f);
    for (const auto& field : fields) {
      LabelMap labels = detail::field_labels(field, bias, h, w);
      const double contrast = 1.0 + cfg.contrast_jitter * uniform(rng);
      Grid<double> feat(h, w, f);
      for (std::size_t i = 0; i < h * w; ++i) {
        const std::size_t c = labels.hard_class(i);
        for (std::size_t j = 0; j < f; ++j) x[j] = contrast * prototypes[c * f + j] + cfg.noise * normal(rng);
        auto out = feat.pixel(i);
        if (shifted) {
          for (std::size_t r = 0; r < f; ++r) {
            double acc = offset[r];
            for (std::size_t col = 0; col < f; ++col) acc += transform[r * f + col] * x[col];
            out[r] = acc;
          }
        } else {
          std::copy(x.begin(), x.end(), out.begin());
        }
      }
      labels_out.push_back(std::move(labels));
      features_out.push_back(std::move(feat));
    }
  };

  std::vector<LabelMap> src_labels, tgt_labels;
  std::vector<Grid<double>> src_feat, tgt_feat;
  make_domain(false, src_labels, src_feat);
  make_domain(true, tgt_labels, tgt_feat);

  for (std::size_t i = 0; i < cfg.images_per_domain; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "src_%04zu", i);
    d.source.push_back({id, std::move(src_feat[i]), std::move(src_labels[i])});
    std::snprintf(id, sizeof id, "tgt_%04zu", i);
    d.target.push_back({id, std::move(tgt_feat[i])});
  }
  d.target_truth = TargetGroundTruth(std::move(tgt_labels));
  return d;
}

}  // namespace densipl
