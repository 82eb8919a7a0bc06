#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"

#include "densipl/confidence.hpp"
#include "densipl/error.hpp"
#include "densipl/losses.hpp"
#include "densipl/pseudolabel.hpp"
#include "densipl/thresholding.hpp"
#include "densipl/voting.hpp"

namespace densipl {

/// Every schedule hyperparameter of the two-phase pipeline.
struct PipelineConfig {
  double base_p = 0.2;
  double p_increment = 0.05;
  double p_cap = 0.5;
  std::size_t window = 57;
  std::size_t vote_iterations = 3;
  double alpha_vote = 0.7;
  double gamma = 2.0;
  double q_base = 0.30;
  double q_increment = 0.05;
  double beta = 0.95;
  double alpha_reg = 0.1;
  std::size_t phase1_rounds = 6;
  std::size_t phase2_rounds = 3;
  bool renormalize_soft = true;
  std::uint64_t seed = 0;
  // Ablation switches.
  Regularizer regularizer = Regularizer::mrkld;
  ConfidenceDenominator conf_denominator = ConfidenceDenominator::confident_classes;

  PortionSchedule portion_schedule() const { return {base_p, p_increment, p_cap}; }
  QSchedule q_schedule() const { return {q_base, q_increment}; }
  VotingConfig voting() const { return {window, vote_iterations, alpha_vote}; }
  CalibrationOptions calibration() const { return {gamma, renormalize_soft}; }
  LossConfig loss() const { return {beta, alpha_reg, regularizer}; }

  double portion(std::size_t round) const { return schedule_portion(round, portion_schedule()); }
  /// q for a global round index; rounds before phase 2 map to the first phase-2 value.
  double q(std::size_t round) const {
    return schedule_q(round > phase1_rounds ? round - phase1_rounds : 0, q_schedule());
  }

  void validate() const {
    auto in_unit = [](double v) { return v > 0.0 && v <= 1.0; };
    if (!in_unit(base_p)) fail_input("base_p must be in (0, 1]");
    if (!(p_increment >= 0.0)) fail_input("p_increment must be >= 0");
    if (!in_unit(p_cap)) fail_input("p_cap must be in (0, 1]");
    voting().validate();
    if (!(gamma > 0.0)) fail_input("gamma must be > 0");
    if (!in_unit(q_base)) fail_input("q_base must be in (0, 1]");
    if (!(q_increment >= 0.0)) fail_input("q_increment must be >= 0");
    loss().validate();
  }

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

namespace detail {

/// Reads `key` from `j` into `out` when present, recording the key as known.
template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out, std::set<std::string>& known) {
  known.insert(key);
  if (!j.contains(key)) return;
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!j[key].is_boolean()) fail_input(std::string("config key '") + key + "' must be a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!j[key].is_number_integer() || j[key].template get<std::int64_t>() < 0) {
        fail_input(std::string("config key '") + key + "' must be a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!j[key].is_number()) fail_input(std::string("config key '") + key + "' must be a number");
    }
    out = j[key].get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail_input(std::string("config key '") + key + "': " + e.what());
  }
}

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) fail_input("unknown config key '" + key + "'" + (where.empty() ? "" : " in " + where));
  }
}

}  // namespace detail

/// Parses pipeline keys from `j`. Keys listed in `extra_known` are skipped
/// (nested sections handled by the caller); any other unknown key is an error.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const std::set<std::string>& extra_known = {}) {
  if (!j.is_object()) fail_input("config must be a JSON object");
  PipelineConfig c;
  std::set<std::string> known = extra_known;
  using detail::read_key;
  read_key(j, "base_p", c.base_p, known);
  read_key(j, "p_increment", c.p_increment, known);
  read_key(j, "p_cap", c.p_cap, known);
  read_key(j, "window", c.window, known);
  read_key(j, "vote_iterations", c.vote_iterations, known);
  read_key(j, "alpha_vote", c.alpha_vote, known);
  read_key(j, "gamma", c.gamma, known);
  read_key(j, "q_base", c.q_base, known);
  read_key(j, "q_increment", c.q_increment, known);
  read_key(j, "beta", c.beta, known);
  read_key(j, "alpha_reg", c.alpha_reg, known);
  read_key(j, "phase1_rounds", c.phase1_rounds, known);
  read_key(j, "phase2_rounds", c.phase2_rounds, known);
  read_key(j, "renormalize_soft", c.renormalize_soft, known);
  read_key(j, "seed", c.seed, known);

  std::string reg = c.regularizer == Regularizer::mrkld ? "mrkld" : "none";
  read_key(j, "regularizer", reg, known);
  if (reg == "mrkld") c.regularizer = Regularizer::mrkld;
  else if (reg == "none") c.regularizer = Regularizer::none;
  else fail_input("regularizer must be 'mrkld' or 'none'");

  std::string denom = "confident";
  read_key(j, "conf_denominator", denom, known);
  if (denom == "confident") c.conf_denominator = ConfidenceDenominator::confident_classes;
  else if (denom == "predicted") c.conf_denominator = ConfidenceDenominator::predicted_classes;
  else fail_input("conf_denominator must be 'confident' or 'predicted'");

  detail::reject_unknown(j, known, "");
  c.validate();
  return c;
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  return {{"base_p", c.base_p},
          {"p_increment", c.p_increment},
          {"p_cap", c.p_cap},
          {"window", c.window},
          {"vote_iterations", c.vote_iterations},
          {"alpha_vote", c.alpha_vote},
          {"gamma", c.gamma},
          {"q_base", c.q_base},
          {"q_increment", c.q_increment},
          {"beta", c.beta},
          {"alpha_reg", c.alpha_reg},
          {"phase1_rounds", c.phase1_rounds},
          {"phase2_rounds", c.phase2_rounds},
          {"renormalize_soft", c.renormalize_soft},
          {"seed", c.seed},
          {"regularizer", c.regularizer == Regularizer::mrkld ? "mrkld" : "none"},
          {"conf_denominator",
           c.conf_denominator == ConfidenceDenominator::confident_classes ? "confident" : "predicted"}};
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail_input("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail_input("cannot parse '" + path.string() + "': " + e.what());
  }
}

/// DENSIPL_SEED, when set, replaces the configured seed.
inline void apply_seed_override(PipelineConfig& c) {
  if (const char* env = std::getenv("DENSIPL_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0') fail_input(std::string("DENSIPL_SEED must be an unsigned integer, got '") + env + "'");
    c.seed = v;
  }
}

}  // namespace densipl
