#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "densipl/class_thresholds.hpp"
#include "densipl/label_map.hpp"
#include "densipl/tensor.hpp"

namespace densipl {

namespace detail {

inline void check_classes(const ProbabilityMap& m, const ClassThresholds& lambda) {
  if (m.num_classes() != lambda.size()) {
    fail_input("K mismatch: map has " + std::to_string(m.num_classes()) + " classes, thresholds have " +
               std::to_string(lambda.size()));
  }
}

/// argmax_k p_k / lambda_k (lowest index on ties).
inline std::size_t normalized_argmax(std::span<const float> p, const ClassThresholds& lambda) {
  std::size_t best = 0;
  float best_score = p[0] / lambda[0];
  for (std::size_t k = 1; k < p.size(); ++k) {
    const float s = p[k] / lambda[k];
    if (s > best_score) {
      best = k;
      best_score = s;
    }
  }
  return best;
}

}  // namespace detail

/// Hard(k*) where k* = argmax p/lambda and p(k*) > lambda(k*); Unlabeled otherwise.
inline LabelMap generate_sparse(const ProbabilityMap& m, const ClassThresholds& lambda) {
  detail::check_classes(m, lambda);
  LabelMap out(m.height(), m.width(), m.num_classes());
  for (std::size_t i = 0; i < m.pixels(); ++i) {
    const auto p = m.pixel(i);
    const std::size_t k = detail::normalized_argmax(p, lambda);
    if (p[k] > lambda[k]) out.set_hard(i, k);
  }
  return out;
}

struct CalibrationOptions {
  double gamma = 2.0;
  bool renormalize = true;
};

/// Confident pixels get the same Hard label as generate_sparse; every other
/// pixel gets Soft(v) with v_k = clamp((p_k/lambda_k)^gamma, 0, 1), optionally
/// renormalized onto the simplex.
inline LabelMap generate_full_calibrated(const ProbabilityMap& m, const ClassThresholds& lambda,
                                         const CalibrationOptions& opt = {}) {
  detail::check_classes(m, lambda);
  if (!(opt.gamma > 0.0)) fail_input("gamma must be positive");
  const std::size_t kk = m.num_classes();
  LabelMap out(m.height(), m.width(), kk);
  std::vector<float> v(kk);
  for (std::size_t i = 0; i < m.pixels(); ++i) {
    const auto p = m.pixel(i);
    const std::size_t k = detail::normalized_argmax(p, lambda);
    if (p[k] > lambda[k]) {
      out.set_hard(i, k);
      continue;
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < kk; ++c) {
      const double r = static_cast<double>(p[c] / lambda[c]);
      v[c] = static_cast<float>(std::clamp(std::pow(r, opt.gamma), 0.0, 1.0));
      sum += v[c];
    }
    if (!(sum > 0.0)) {
      fail_invariant("calibrated soft label is all zero at pixel " + std::to_string(i));
    }
    if (opt.renormalize) {
      for (auto& x : v) x = static_cast<float>(x / sum);
    }
    out.set_soft(i, v);
  }
  return out;
}

}  // namespace densipl
