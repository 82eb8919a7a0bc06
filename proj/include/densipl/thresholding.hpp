#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "densipl/class_thresholds.hpp"
#include "densipl/error.hpp"
#include "densipl/tensor.hpp"

namespace densipl {

/// Per-class multiset of max-probabilities of pixels whose argmax is that class.
/// The multiset is kept unsorted; order never affects the thresholds.
class ClassConfidencePool {
 public:
  ClassConfidencePool() = default;
  explicit ClassConfidencePool(std::size_t num_classes) : values_(num_classes) {}

  std::size_t num_classes() const { return values_.size(); }
  const std::vector<float>& values(std::size_t k) const { return values_[k]; }
  std::size_t count(std::size_t k) const { return values_[k].size(); }
  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  void add(std::size_t k, float value) { values_[k].push_back(value); }

  /// Appends one map's pixels. Throws on a class-count mismatch.
  void accumulate(const ProbabilityMap& m) {
    if (values_.empty()) values_.resize(m.num_classes());
    if (m.num_classes() != values_.size()) {
      fail_input("inconsistent K across maps: pool has " + std::to_string(values_.size()) +
                 ", map has " + std::to_string(m.num_classes()));
    }
    for (std::size_t i = 0; i < m.pixels(); ++i) {
      const auto p = m.pixel(i);
      const std::size_t k = argmax_lowest(p);
      values_[k].push_back(p[k]);
    }
  }

  void merge(const ClassConfidencePool& other) {
    if (values_.empty()) values_.resize(other.num_classes());
    if (other.num_classes() != values_.size()) fail_input("cannot merge pools with different K");
    for (std::size_t k = 0; k < values_.size(); ++k) {
      values_[k].insert(values_[k].end(), other.values_[k].begin(), other.values_[k].end());
    }
  }

 private:
  std::vector<std::vector<float>> values_;
};

template <class Range>
ClassConfidencePool collect_class_max_probs(const Range& maps, std::size_t num_classes = 0) {
  ClassConfidencePool pool(num_classes);
  for (const ProbabilityMap& m : maps) pool.accumulate(m);
  return pool;
}

/// Number of selected entries out of n for portion p: ceil(p*n), at least 1.
/// A relative slack of 1e-9 absorbs binary representation error in p so that
/// e.g. p=0.3, n=10 selects 3 rather than 4.
inline std::size_t selection_count(double portion, std::size_t n) {
  const double exact = portion * static_cast<double>(n);
  auto count = static_cast<std::size_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
  return std::clamp<std::size_t>(count, 1, n);
}

inline void check_portion(double p, const char* name = "p") {
  if (!(p > 0.0 && p <= 1.0)) fail_input(std::string(name) + " must be in (0, 1], got " + std::to_string(p));
}

/// lambda_k = the ceil(p*n_k)-th largest pooled value of class k, capped at
/// kLambdaCap; classes with an empty pool get kLambdaCap.
inline ClassThresholds compute_thresholds(const ClassConfidencePool& pool, double p) {
  check_portion(p);
  std::vector<float> lambdas(pool.num_classes(), kLambdaCap);
  std::vector<float> scratch;
  for (std::size_t k = 0; k < pool.num_classes(); ++k) {
    const auto& v = pool.values(k);
    if (v.empty()) continue;
    scratch.assign(v.begin(), v.end());
    const std::size_t idx = selection_count(p, scratch.size()) - 1;
    std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(idx), scratch.end(),
                     std::greater<>{});
    const float value = scratch[idx];
    // A pooled max-probability is at least 1/K, so value > 0 for any K.
    lambdas[k] = std::min(value, kLambdaCap);
  }
  return ClassThresholds(std::move(lambdas), p);
}

struct PortionSchedule {
  double base = 0.2;
  double increment = 0.05;
  double cap = 0.5;
};

inline double schedule_portion(std::size_t round_index, const PortionSchedule& s = {}) {
  return std::min(s.base + static_cast<double>(round_index) * s.increment, s.cap);
}

}  // namespace densipl
