#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"

#include "densipl/class_thresholds.hpp"
#include "densipl/error.hpp"
#include "densipl/tensor.hpp"

namespace densipl {

struct ConfidenceReport {
  std::string id;
  double conf = 0.0;
  std::vector<std::size_t> n;       // pixels argmax-predicted as class k
  std::vector<std::size_t> n_star;  // of those, pixels with p(k) > lambda_k
  std::size_t k_prime = 0;

  friend bool operator==(const ConfidenceReport&, const ConfidenceReport&) = default;
};

/// What the 1/K' average divides by.
enum class ConfidenceDenominator {
  confident_classes,  // classes with n_star_k > 0
  predicted_classes,  // classes with n_k > 0
};

/// conf = (1/K') * sum over predicted classes of (n*_k / n_k) / lambda_k,
/// and 0 when K' = 0.
inline ConfidenceReport confidence_score(const ProbabilityMap& m, const ClassThresholds& lambda, std::string id = {},
                                         ConfidenceDenominator denom = ConfidenceDenominator::confident_classes) {
  if (m.num_classes() != lambda.size()) fail_input("K mismatch between map and thresholds");
  const std::size_t kk = m.num_classes();
  ConfidenceReport r;
  r.id = std::move(id);
  r.n.assign(kk, 0);
  r.n_star.assign(kk, 0);
  for (std::size_t i = 0; i < m.pixels(); ++i) {
    const auto p = m.pixel(i);
    const std::size_t k = argmax_lowest(p);
    ++r.n[k];
    if (p[k] > lambda[k]) ++r.n_star[k];
  }
  double sum = 0.0;
  std::size_t predicted = 0;
  for (std::size_t k = 0; k < kk; ++k) {
    if (r.n_star[k] > 0) ++r.k_prime;
    if (r.n[k] == 0) continue;
    ++predicted;
    sum += static_cast<double>(r.n_star[k]) / static_cast<double>(r.n[k]) / static_cast<double>(lambda[k]);
  }
  const std::size_t denominator = denom == ConfidenceDenominator::confident_classes ? r.k_prime : predicted;
  r.conf = r.k_prime == 0 ? 0.0 : sum / static_cast<double>(denominator);
  return r;
}

struct EasyHardSplit {
  double q = 0.0;
  std::vector<std::string> easy;
  std::vector<std::string> hard;
};

/// Number of easy images out of `total` for portion q: max(1, floor(q*total)).
/// Same representation slack as selection_count.
inline std::size_t easy_count(double q, std::size_t total) {
  const double exact = q * static_cast<double>(total);
  const auto n = static_cast<std::size_t>(std::floor(exact + 1e-9 * std::max(1.0, exact)));
  return std::clamp<std::size_t>(n, 1, total);
}

/// Ranks by conf descending (ties by id ascending); the top max(1, floor(qN)) are easy.
inline EasyHardSplit split_easy_hard(const std::vector<ConfidenceReport>& reports, double q) {
  if (reports.empty()) fail_input("split_easy_hard needs at least one report");
  if (!(q > 0.0 && q <= 1.0)) fail_input("q must be in (0, 1], got " + std::to_string(q));
  std::vector<const ConfidenceReport*> order;
  for (const auto& r : reports) order.push_back(&r);
  std::sort(order.begin(), order.end(), [](const ConfidenceReport* a, const ConfidenceReport* b) {
    if (a->conf != b->conf) return a->conf > b->conf;
    return a->id < b->id;
  });
  EasyHardSplit s;
  s.q = q;
  const std::size_t n_easy = easy_count(q, order.size());
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_easy ? s.easy : s.hard).push_back(order[i]->id);
  return s;
}

struct QSchedule {
  double base = 0.30;
  double increment = 0.05;
};

inline double schedule_q(std::size_t phase2_round_index, const QSchedule& s = {}) {
  return std::min(s.base + static_cast<double>(phase2_round_index) * s.increment, 1.0);
}

inline nlohmann::json to_json(const ConfidenceReport& r) {
  return {{"id", r.id}, {"conf", r.conf}, {"n", r.n}, {"n_star", r.n_star}};
}

inline ConfidenceReport confidence_report_from_json(const nlohmann::json& j) {
  for (const char* key : {"id", "conf", "n", "n_star"}) {
    if (!j.contains(key)) fail_input(std::string("confidence record missing '") + key + "'");
  }
  ConfidenceReport r;
  r.id = j["id"].get<std::string>();
  r.conf = j["conf"].get<double>();
  r.n = j["n"].get<std::vector<std::size_t>>();
  r.n_star = j["n_star"].get<std::vector<std::size_t>>();
  for (auto v : r.n_star) r.k_prime += v > 0;
  return r;
}

inline nlohmann::json to_json(const EasyHardSplit& s) {
  return {{"q", s.q}, {"easy", s.easy}, {"hard", s.hard}};
}

inline EasyHardSplit split_from_json(const nlohmann::json& j) {
  for (const char* key : {"q", "easy", "hard"}) {
    if (!j.contains(key)) fail_input(std::string("split JSON missing '") + key + "'");
  }
  EasyHardSplit s;
  s.q = j["q"].get<double>();
  s.easy = j["easy"].get<std::vector<std::string>>();
  s.hard = j["hard"].get<std::vector<std::string>>();
  return s;
}

}  // namespace densipl
