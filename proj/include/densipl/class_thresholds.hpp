#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "densipl/error.hpp"
#include "densipl/tensor.hpp"

namespace densipl {

/// Upper bound on any class threshold; also the value used for classes that
/// were never predicted.
inline constexpr float kLambdaCap = 0.999f;

/// Per-class selection thresholds and the portion they were computed for.
class ClassThresholds {
 public:
  ClassThresholds() = default;

  ClassThresholds(std::vector<float> lambdas, double portion)
      : lambdas_(std::move(lambdas)), portion_(portion) {
    for (std::size_t k = 0; k < lambdas_.size(); ++k) {
      if (!(lambdas_[k] > 0.0f)) {
        fail_invariant("class threshold lambda_" + std::to_string(k) + " must be positive, got " +
                       std::to_string(lambdas_[k]));
      }
    }
  }

  /// Thresholds that leave probabilities unscaled. Not capped; meant for tests
  /// and for the pure cross-entropy reduction.
  static ClassThresholds unit(std::size_t k) { return ClassThresholds(std::vector<float>(k, 1.0f), 1.0); }

  std::size_t size() const { return lambdas_.size(); }
  float operator[](std::size_t k) const { return lambdas_[k]; }
  std::span<const float> lambdas() const { return lambdas_; }
  double portion() const { return portion_; }

  friend bool operator==(const ClassThresholds&, const ClassThresholds&) = default;

 private:
  std::vector<float> lambdas_;
  double portion_ = 0.0;
};

inline nlohmann::json to_json(const ClassThresholds& t) {
  nlohmann::json j;
  j["p"] = t.portion();
  j["lambdas"] = std::vector<float>(t.lambdas().begin(), t.lambdas().end());
  return j;
}

inline ClassThresholds thresholds_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("p") || !j.contains("lambdas") || !j["lambdas"].is_array()) {
    fail_input("thresholds JSON must be {\"p\": number, \"lambdas\": [numbers]}");
  }
  for (const auto& [key, _] : j.items()) {
    if (key != "p" && key != "lambdas") fail_input("unknown key '" + key + "' in thresholds JSON");
  }
  std::vector<float> lambdas;
  for (const auto& v : j["lambdas"]) {
    if (!v.is_number()) fail_input("thresholds 'lambdas' must contain numbers");
    lambdas.push_back(v.get<float>());
  }
  return ClassThresholds(std::move(lambdas), j["p"].get<double>());
}

/// output[h,w,k] = p[h,w,k] / lambda_k, computed in float32.
inline Grid<float> normalized_scores(const ProbabilityMap& m, const ClassThresholds& lambda) {
  if (lambda.size() != m.num_classes()) {
    fail_input("threshold count " + std::to_string(lambda.size()) + " does not match K=" +
               std::to_string(m.num_classes()));
  }
  for (std::size_t k = 0; k < lambda.size(); ++k) {
    if (!(lambda[k] > 0.0f)) fail_invariant("normalized_scores requires positive thresholds");
  }
  Grid<float> out(m.height(), m.width(), m.num_classes());
  const auto& src = m.grid().data;
  const std::size_t kk = m.num_classes();
  for (std::size_t i = 0; i < src.size(); ++i) out.data[i] = src[i] / lambda[i % kk];
  return out;
}

}  // namespace densipl
