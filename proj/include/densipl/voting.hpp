#pragma once

// Sliding-window voting densification.
//
// One round looks at every Unlabeled pixel, takes its two highest normalized
// scores as candidate classes, and pools the scores of window neighbours that
// are already Hard with that class. The pooled mean is blended with the
// pixel's own score; the better candidate wins if its blend exceeds 1 and it
// had at least one supporting neighbour.
//
// Window sums are accumulated in 128-bit fixed point so the summed-area table
// path and the direct scan produce identical sums, hence identical labels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "densipl/class_thresholds.hpp"
#include "densipl/error.hpp"
#include "densipl/label_map.hpp"
#include "densipl/pseudolabel.hpp"
#include "densipl/tensor.hpp"

namespace densipl {

struct VotingConfig {
  std::size_t window = 57;
  std::size_t iterations = 3;
  double alpha_vote = 0.7;

  void validate() const {
    if (window < 3 || window % 2 == 0) fail_input("voting window must be odd and >= 3, got " + std::to_string(window));
    if (iterations < 1) fail_input("voting iterations must be >= 1");
    if (!(alpha_vote >= 0.0 && alpha_vote <= 1.0)) fail_input("alpha_vote must be in [0, 1]");
  }
};

namespace detail {

using wide_int = __int128;

/// Power-of-two scale mapping non-negative float scores onto 128-bit integers.
/// The scale leaves headroom for summing every pixel of the image; values
/// finer than the resolution are truncated identically on every code path.
class FixedPointScale {
 public:
  FixedPointScale(const Grid<float>& scores) {
    float max_score = 0.0f;
    for (float v : scores.data) max_score = std::max(max_score, v);
    if (max_score <= 0.0f) return;
    int exp_max = 0;
    std::frexp(max_score, &exp_max);  // max_score < 2^exp_max
    int exp_count = 0;
    std::frexp(static_cast<double>(scores.pixels()) + 1.0, &exp_count);
    shift_ = 125 - exp_max - exp_count;
  }

  wide_int to_fixed(float v) const {
    return static_cast<wide_int>(std::ldexp(static_cast<double>(v), shift_));
  }
  double mean(wide_int sum, std::size_t count) const {
    return std::ldexp(static_cast<double>(sum), -shift_) / static_cast<double>(count);
  }

 private:
  int shift_ = 0;
};

struct Candidates {
  std::size_t first = 0;
  std::size_t second = 0;
  bool has_second = false;
};

inline Candidates top_two(std::span<const float> s) {
  Candidates c;
  c.first = argmax_lowest(s);
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (k == c.first) continue;
    if (!c.has_second || s[k] > s[c.second]) {
      c.second = k;
      c.has_second = true;
    }
  }
  return c;
}

struct Pooled {
  double mean = 0.0;
  std::size_t count = 0;
};

/// Decision for one Unlabeled pixel given the pooled evidence of its two
/// candidates. Returns the class to assign or LabelMap::kUnlabeled.
inline std::uint16_t decide(std::span<const float> score, const Candidates& cand, const Pooled& p1,
                            const Pooled& p2, double alpha) {
  const double combined1 = alpha * static_cast<double>(score[cand.first]) + (1.0 - alpha) * p1.mean;
  std::size_t winner = cand.first;
  double best = combined1;
  std::size_t support = p1.count;
  if (cand.has_second) {
    const double combined2 = alpha * static_cast<double>(score[cand.second]) + (1.0 - alpha) * p2.mean;
    if (combined2 > combined1 || (combined2 == combined1 && cand.second < cand.first)) {
      winner = cand.second;
      best = combined2;
      support = p2.count;
    }
  }
  if (support == 0 || !(best > 1.0)) return LabelMap::kUnlabeled;
  return static_cast<std::uint16_t>(winner);
}

inline void check_voting_inputs(const Grid<float>& scores, const LabelMap& labels, const VotingConfig& cfg) {
  cfg.validate();
  if (!scores.same_shape(labels.height(), labels.width(), labels.num_classes())) {
    fail_input("shape mismatch between scores [" + std::to_string(scores.height) + "x" +
               std::to_string(scores.width) + "x" + std::to_string(scores.channels) + "] and labels [" +
               std::to_string(labels.height()) + "x" + std::to_string(labels.width()) + "x" +
               std::to_string(labels.num_classes()) + "]");
  }
  for (std::size_t i = 0; i < labels.pixels(); ++i) {
    if (labels.kind(i) == LabelKind::soft) fail_input("voting expects Hard/Unlabeled labels only");
  }
}

/// Inclusive window bounds, clipped to [0, n).
inline std::pair<std::size_t, std::size_t> window_span(std::size_t center, std::size_t radius, std::size_t n) {
  const std::size_t lo = center >= radius ? center - radius : 0;
  const std::size_t hi = std::min(n - 1, center + radius);
  return {lo, hi};
}

/// Summed-area tables of fixed-point score and count for one class mask.
class MaskedIntegral {
 public:
  MaskedIntegral(std::size_t h, std::size_t w) : h_(h), w_(w), sum_((h + 1) * (w + 1)), cnt_((h + 1) * (w + 1)) {}

  void build(const Grid<float>& scores, const LabelMap& labels, std::size_t cls, const FixedPointScale& fx) {
    for (std::size_t y = 0; y < h_; ++y) {
      wide_int row_sum = 0;
      std::uint32_t row_cnt = 0;
      for (std::size_t x = 0; x < w_; ++x) {
        const std::size_t i = y * w_ + x;
        if (labels.is_hard(i) && labels.hard_class(i) == cls) {
          row_sum += fx.to_fixed(scores.at(y, x, cls));
          ++row_cnt;
        }
        sum_[idx(y + 1, x + 1)] = sum_[idx(y, x + 1)] + row_sum;
        cnt_[idx(y + 1, x + 1)] = cnt_[idx(y, x + 1)] + row_cnt;
      }
    }
  }

  /// Sum and count over rows [y0,y1] x cols [x0,x1], inclusive.
  std::pair<wide_int, std::size_t> query(std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) const {
    const wide_int s = sum_[idx(y1 + 1, x1 + 1)] - sum_[idx(y0, x1 + 1)] - sum_[idx(y1 + 1, x0)] + sum_[idx(y0, x0)];
    const std::size_t c = cnt_[idx(y1 + 1, x1 + 1)] - cnt_[idx(y0, x1 + 1)] - cnt_[idx(y1 + 1, x0)] + cnt_[idx(y0, x0)];
    return {s, c};
  }

 private:
  std::size_t idx(std::size_t y, std::size_t x) const { return y * (w_ + 1) + x; }

  std::size_t h_, w_;
  std::vector<wide_int> sum_;
  std::vector<std::uint32_t> cnt_;
};

/// Summed-area-table implementation. `reverse_order` visits pixels back to
/// front; with snapshot semantics the result must not depend on it.
inline LabelMap vote_round_impl(const Grid<float>& scores, const LabelMap& labels, const VotingConfig& cfg,
                                bool reverse_order) {
  check_voting_inputs(scores, labels, cfg);
  const std::size_t h = labels.height(), w = labels.width(), kk = labels.num_classes();
  const std::size_t radius = cfg.window / 2;
  const FixedPointScale fx(scores);

  std::vector<std::size_t> pending;
  std::vector<Candidates> cand;
  for (std::size_t i = 0; i < labels.pixels(); ++i) {
    if (!labels.is_unlabeled(i)) continue;
    pending.push_back(i);
    cand.push_back(top_two(scores.pixel(i)));
  }
  if (reverse_order) {
    std::reverse(pending.begin(), pending.end());
    std::reverse(cand.begin(), cand.end());
  }

  std::vector<Pooled> pooled1(pending.size()), pooled2(pending.size());
  std::vector<char> class_needed(kk, 0);
  for (const auto& c : cand) {
    class_needed[c.first] = 1;
    if (c.has_second) class_needed[c.second] = 1;
  }

  // One class table at a time keeps memory at O(H*W) regardless of K.
  MaskedIntegral table(h, w);
  for (std::size_t cls = 0; cls < kk; ++cls) {
    if (!class_needed[cls]) continue;
    table.build(scores, labels, cls, fx);
    for (std::size_t n = 0; n < pending.size(); ++n) {
      const bool is_first = cand[n].first == cls;
      const bool is_second = cand[n].has_second && cand[n].second == cls;
      if (!is_first && !is_second) continue;
      const std::size_t y = pending[n] / w, x = pending[n] % w;
      const auto [y0, y1] = window_span(y, radius, h);
      const auto [x0, x1] = window_span(x, radius, w);
      const auto [sum, count] = table.query(y0, y1, x0, x1);
      Pooled p;
      p.count = count;
      p.mean = count ? fx.mean(sum, count) : 0.0;
      (is_first ? pooled1[n] : pooled2[n]) = p;
    }
  }

  LabelMap out = labels;
  for (std::size_t n = 0; n < pending.size(); ++n) {
    const auto cls = decide(scores.pixel(pending[n]), cand[n], pooled1[n], pooled2[n], cfg.alpha_vote);
    if (cls != LabelMap::kUnlabeled) out.set_hard(pending[n], cls);
  }
  return out;
}

}  // namespace detail

/// One synchronous voting iteration. `scores` must be normalized_scores(m, lambda)
/// and `labels` Hard/Unlabeled with matching shape.
inline LabelMap vote_round(const Grid<float>& scores, const LabelMap& labels, const VotingConfig& cfg) {
  return detail::vote_round_impl(scores, labels, cfg, false);
}

/// Reference implementation: a direct scan of every window, no tables.
inline LabelMap vote_round_oracle(const Grid<float>& scores, const LabelMap& labels, const VotingConfig& cfg) {
  detail::check_voting_inputs(scores, labels, cfg);
  const std::size_t h = labels.height(), w = labels.width();
  const std::size_t radius = cfg.window / 2;
  const detail::FixedPointScale fx(scores);

  auto pool = [&](std::size_t y, std::size_t x, std::size_t cls) {
    detail::wide_int sum = 0;
    std::size_t count = 0;
    for (std::size_t yy = (y >= radius ? y - radius : 0); yy <= std::min(h - 1, y + radius); ++yy) {
      for (std::size_t xx = (x >= radius ? x - radius : 0); xx <= std::min(w - 1, x + radius); ++xx) {
        if (yy == y && xx == x) continue;
        const std::size_t j = yy * w + xx;
        if (labels.is_hard(j) && labels.hard_class(j) == cls) {
          sum += fx.to_fixed(scores.at(yy, xx, cls));
          ++count;
        }
      }
    }
    return detail::Pooled{count ? fx.mean(sum, count) : 0.0, count};
  };

  LabelMap out = labels;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      if (!labels.is_unlabeled(i)) continue;
      const auto s = scores.pixel(i);
      const auto cand = detail::top_two(s);
      const auto p1 = pool(y, x, cand.first);
      const auto p2 = cand.has_second ? pool(y, x, cand.second) : detail::Pooled{};
      const auto cls = detail::decide(s, cand, p1, p2, cfg.alpha_vote);
      if (cls != LabelMap::kUnlabeled) out.set_hard(i, cls);
    }
  }
  return out;
}

/// Called after each voting iteration with (1-based iteration, labels).
using VotingObserver = std::function<void(std::size_t, const LabelMap&)>;

/// Voting rounds starting from existing sparse labels.
inline LabelMap densify_from(const Grid<float>& scores, LabelMap labels, const VotingConfig& cfg,
                             const VotingObserver& observer = {}) {
  cfg.validate();
  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    labels = vote_round(scores, labels, cfg);
    if (observer) observer(it, labels);
  }
  return labels;
}

/// generate_sparse followed by cfg.iterations voting rounds on p/lambda.
inline LabelMap densify(const ProbabilityMap& m, const ClassThresholds& lambda, const VotingConfig& cfg,
                        const VotingObserver& observer = {}) {
  cfg.validate();
  const Grid<float> scores = normalized_scores(m, lambda);
  LabelMap labels = generate_sparse(m, lambda);
  return densify_from(scores, std::move(labels), cfg, observer);
}

}  // namespace densipl
