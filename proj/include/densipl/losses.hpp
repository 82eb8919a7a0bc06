#pragma once

// Self-training losses and their gradients with respect to logits.
//
// Every per-pixel loss is a mean over the pixels that contribute (labeled
// pixels for target terms). Probability logs are clamped at 1e-12 and
// discriminator outputs at [1e-7, 1 - 1e-7]. Gradients are exact derivatives
// of the clamped losses, so they vanish where a clamp is active.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "densipl/class_thresholds.hpp"
#include "densipl/error.hpp"
#include "densipl/label_map.hpp"
#include "densipl/tensor.hpp"

namespace densipl {

inline constexpr double kProbEpsilon = 1e-12;
inline constexpr double kLogArgMax = 1e12;
inline constexpr double kDiscEpsilon = 1e-7;

enum class Regularizer { none, mrkld };

struct LossConfig {
  double beta = 0.95;
  double alpha_reg = 0.1;
  Regularizer regularizer = Regularizer::mrkld;

  void validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) fail_input("beta must be in [0, 1]");
    if (!(alpha_reg >= 0.0)) fail_input("alpha_reg must be >= 0");
  }
};

/// A loss broken into its named parts; total() sums the parts that are present.
struct LossValue {
  std::optional<double> source_ce;
  std::optional<double> target_bootstrap;
  std::optional<double> regularizer;
  std::optional<double> adversarial;

  double total() const {
    return source_ce.value_or(0.0) + target_bootstrap.value_or(0.0) + regularizer.value_or(0.0) +
           adversarial.value_or(0.0);
  }
};

inline nlohmann::json to_json(const LossValue& v) {
  nlohmann::json components = nlohmann::json::object();
  if (v.source_ce) components["source_ce"] = *v.source_ce;
  if (v.target_bootstrap) components["target_bootstrap"] = *v.target_bootstrap;
  if (v.regularizer) components["regularizer"] = *v.regularizer;
  if (v.adversarial) components["adversarial"] = *v.adversarial;
  return {{"total", v.total()}, {"components", components}};
}

namespace detail {

template <class T>
void check_label_shape(const Grid<T>& p, const LabelMap& y) {
  if (!p.same_shape(y.height(), y.width(), y.num_classes())) {
    fail_input("shape mismatch between probability map and label map");
  }
}

inline double clamped_log(double x) { return std::log(std::clamp(x, kProbEpsilon, kLogArgMax)); }
inline bool log_clamp_inactive(double x) { return x >= kProbEpsilon && x <= kLogArgMax; }

/// Writes the label vector of pixel i into `out` (one-hot for Hard).
inline void label_vector(const LabelMap& y, std::size_t i, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  if (y.is_hard(i)) {
    out[y.hard_class(i)] = 1.0;
  } else if (y.kind(i) == LabelKind::soft) {
    const auto s = y.soft(i);
    std::copy(s.begin(), s.end(), out.begin());
  }
}

inline void check_lambda(const ClassThresholds& lambda, std::size_t k) {
  if (lambda.size() != k) fail_input("threshold count does not match K");
  for (std::size_t c = 0; c < k; ++c) {
    if (!(lambda[c] > 0.0f)) fail_input("thresholds must be positive");
  }
}

}  // namespace detail

/// Mean over pixels of -log p(y_i). Every pixel must be Hard.
template <class T>
double source_ce_loss(const Grid<T>& p, const LabelMap& y) {
  detail::check_label_shape(p, y);
  double sum = 0.0;
  for (std::size_t i = 0; i < y.pixels(); ++i) {
    if (!y.is_hard(i)) fail_input("source cross-entropy needs all-Hard labels; pixel " + std::to_string(i) + " is not");
    sum -= std::log(std::max(static_cast<double>(p.pixel(i)[y.hard_class(i)]), kProbEpsilon));
  }
  return sum / static_cast<double>(y.pixels());
}

/// Mean over labeled pixels of -sum_k [beta*y_k + (1-beta)*s_k] * log s_k with
/// s = p/lambda. Unlabeled pixels contribute nothing; 0 if none are labeled.
template <class T>
double bootstrapped_target_loss(const Grid<T>& p, const LabelMap& y, const ClassThresholds& lambda, double beta) {
  detail::check_label_shape(p, y);
  const std::size_t kk = y.num_classes();
  detail::check_lambda(lambda, kk);
  std::vector<double> target(kk);
  double sum = 0.0;
  std::size_t labeled = 0;
  for (std::size_t i = 0; i < y.pixels(); ++i) {
    if (y.is_unlabeled(i)) continue;
    ++labeled;
    detail::label_vector(y, i, target);
    const auto pi = p.pixel(i);
    for (std::size_t k = 0; k < kk; ++k) {
      const double s = static_cast<double>(pi[k]) / static_cast<double>(lambda[k]);
      sum -= (beta * target[k] + (1.0 - beta) * s) * detail::clamped_log(s);
    }
  }
  return labeled ? sum / static_cast<double>(labeled) : 0.0;
}

/// Mean over masked pixels of -(1/K) sum_k log p_k (KL to uniform up to a constant).
template <class T>
double mrkld_regularizer(const Grid<T>& p, std::span<const std::uint8_t> labeled_mask) {
  if (labeled_mask.size() != p.pixels()) fail_input("mask size does not match map");
  const double inv_k = 1.0 / static_cast<double>(p.channels);
  double sum = 0.0;
  std::size_t labeled = 0;
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    if (!labeled_mask[i]) continue;
    ++labeled;
    for (auto v : p.pixel(i)) sum -= inv_k * std::log(std::max(static_cast<double>(v), kProbEpsilon));
  }
  return labeled ? sum / static_cast<double>(labeled) : 0.0;
}

/// Source cross-entropy + bootstrapped target term + weighted regularizer on
/// the target's labeled pixels.
template <class T>
LossValue phase1_loss(const Grid<T>& source_p, const LabelMap& source_y, const Grid<T>& target_p,
                      const LabelMap& target_y, const ClassThresholds& lambda, const LossConfig& cfg) {
  cfg.validate();
  LossValue v;
  v.source_ce = source_ce_loss(source_p, source_y);
  v.target_bootstrap = bootstrapped_target_loss(target_p, target_y, lambda, cfg.beta);
  if (cfg.regularizer == Regularizer::mrkld) {
    v.regularizer = cfg.alpha_reg * mrkld_regularizer(target_p, labeled_mask(target_y));
  }
  return v;
}

/// Bootstrapped loss over a fully labeled (easy) image.
template <class T>
double phase2_easy_loss(const Grid<T>& p, const LabelMap& y, const ClassThresholds& lambda, double beta) {
  if (y.count(LabelKind::unlabeled) != 0) fail_input("easy-image labels must cover every pixel");
  return bootstrapped_target_loss(p, y, lambda, beta);
}

/// I[h,w,k] = -p log p with 0 log 0 = 0.
template <class T>
Grid<T> weighted_self_information(const Grid<T>& p) {
  Grid<T> out(p.height, p.width, p.channels);
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    const double v = static_cast<double>(p.data[i]);
    out.data[i] = v > 0.0 ? static_cast<T>(-v * std::log(v)) : T{0};
  }
  return out;
}

/// Channel-wise spatial mean of a grid.
template <class T>
std::vector<double> spatial_mean(const Grid<T>& g) {
  std::vector<double> m(g.channels, 0.0);
  for (std::size_t i = 0; i < g.pixels(); ++i) {
    const auto px = g.pixel(i);
    for (std::size_t k = 0; k < g.channels; ++k) m[k] += static_cast<double>(px[k]);
  }
  for (auto& v : m) v /= static_cast<double>(g.pixels());
  return m;
}

namespace detail {
inline double clamp_disc(double d) {
  if (!std::isfinite(d) || d < 0.0 || d > 1.0) {
    fail_input("discriminator output must be a probability, got " + std::to_string(d));
  }
  return std::clamp(d, kDiscEpsilon, 1.0 - kDiscEpsilon);
}
}  // namespace detail

/// -log d for easy samples, -log(1-d) for hard ones.
inline double discriminator_bce(double d_out, bool is_easy) {
  const double d = detail::clamp_disc(d_out);
  return is_easy ? -std::log(d) : -std::log(1.0 - d);
}

/// Discriminator objective: mean over easy of -log d plus mean over hard of
/// -log(1-d). An empty side contributes 0.
inline double discriminator_bce(std::span<const double> d_easy, std::span<const double> d_hard) {
  double easy = 0.0, hard = 0.0;
  for (double d : d_easy) easy += discriminator_bce(d, true);
  for (double d : d_hard) hard += discriminator_bce(d, false);
  return (d_easy.empty() ? 0.0 : easy / static_cast<double>(d_easy.size())) +
         (d_hard.empty() ? 0.0 : hard / static_cast<double>(d_hard.size()));
}

/// Adversarial objective for the segmentation model: hard samples scored as easy.
inline double generator_adv_loss(double d_out_on_hard) { return discriminator_bce(d_out_on_hard, true); }

inline double generator_adv_loss(std::span<const double> d_hard) {
  if (d_hard.empty()) return 0.0;
  double sum = 0.0;
  for (double d : d_hard) sum += generator_adv_loss(d);
  return sum / static_cast<double>(d_hard.size());
}

/// Logistic regression over a K-dimensional feature: sigma(w.x + b).
struct LogisticDiscriminator {
  std::vector<double> weights;
  double bias = 0.0;

  double logit(std::span<const double> x) const {
    if (x.size() != weights.size()) fail_input("discriminator feature size mismatch");
    double a = bias;
    for (std::size_t k = 0; k < x.size(); ++k) a += weights[k] * x[k];
    return a;
  }
  double operator()(std::span<const double> x) const { return 1.0 / (1.0 + std::exp(-logit(x))); }
};

/// Discriminator objective over easy (target 1) and hard (target 0) features
/// with its gradient in the discriminator's parameters.
struct DiscriminatorLossAndGradient {
  double loss = 0.0;
  LogisticDiscriminator gradient;
};

inline DiscriminatorLossAndGradient discriminator_loss_with_gradient(const LogisticDiscriminator& disc,
                                                                     const std::vector<std::vector<double>>& easy,
                                                                     const std::vector<std::vector<double>>& hard) {
  DiscriminatorLossAndGradient out{0.0, {std::vector<double>(disc.weights.size(), 0.0), 0.0}};
  std::vector<double> d_easy, d_hard;
  auto accumulate = [&](const std::vector<std::vector<double>>& set, double label, std::vector<double>& outs) {
    const double scale = 1.0 / static_cast<double>(set.size());
    for (const auto& x : set) {
      const double d = disc(x);
      outs.push_back(d);
      // Inside the clamp the BCE gradient in the logit is d - label.
      const double dc = std::clamp(d, kDiscEpsilon, 1.0 - kDiscEpsilon);
      const double da = dc == d ? scale * (d - label) : 0.0;
      for (std::size_t k = 0; k < x.size(); ++k) out.gradient.weights[k] += da * x[k];
      out.gradient.bias += da;
    }
  };
  if (!easy.empty()) accumulate(easy, 1.0, d_easy);
  if (!hard.empty()) accumulate(hard, 0.0, d_hard);
  out.loss = discriminator_bce(d_easy, d_hard);
  return out;
}

/// Generator adversarial loss of one image as a function of its probabilities:
/// -log D(spatial mean of I).
template <class T>
double generator_adv_loss(const Grid<T>& p, const LogisticDiscriminator& disc) {
  return generator_adv_loss(disc(spatial_mean(weighted_self_information(p))));
}

// ---------------------------------------------------------------------------
// Gradients with respect to logits

inline Grid<double> softmax(const Grid<double>& logits) {
  Grid<double> p(logits.height, logits.width, logits.channels);
  for (std::size_t i = 0; i < logits.pixels(); ++i) {
    const auto z = logits.pixel(i);
    auto out = p.pixel(i);
    const double zmax = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) sum += out[k] = std::exp(z[k] - zmax);
    for (auto& v : out) v /= sum;
  }
  return p;
}

/// Float32 probability map from logits (validated).
inline ProbabilityMap probability_map_from_logits(const Grid<double>& logits) {
  const Grid<double> p = softmax(logits);
  Grid<float> f(p.height, p.width, p.channels);
  for (std::size_t i = 0; i < p.data.size(); ++i) f.data[i] = static_cast<float>(p.data[i]);
  return ProbabilityMap(std::move(f));
}

namespace loss {
struct SourceCrossEntropy {
  const LabelMap& labels;
};
struct BootstrappedTarget {
  const LabelMap& labels;
  const ClassThresholds& thresholds;
  double beta;
};
struct Mrkld {
  std::span<const std::uint8_t> mask;
};
/// Target part of the first-phase objective: bootstrapped term plus
/// alpha_reg times MRKLD on labeled pixels.
struct Phase1Target {
  const LabelMap& labels;
  const ClassThresholds& thresholds;
  LossConfig config;
};
/// Second-phase easy-image objective (bootstrapped, fully labeled).
struct Phase2Easy {
  const LabelMap& labels;
  const ClassThresholds& thresholds;
  double beta;
};
struct GeneratorAdversarial {
  const LogisticDiscriminator& discriminator;
};
}  // namespace loss

using LossSelector = std::variant<loss::SourceCrossEntropy, loss::BootstrappedTarget, loss::Mrkld, loss::Phase1Target,
                                  loss::Phase2Easy, loss::GeneratorAdversarial>;

struct LossAndGradient {
  double loss = 0.0;
  Grid<double> gradient;  // d loss / d logits
};

namespace detail {

/// Given h_j = p_j * dL/dp_j per pixel, applies the softmax Jacobian in place:
/// dL/dz_j = h_j - p_j * sum_k h_k.
inline void softmax_backward(const Grid<double>& p, Grid<double>& h) {
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    const auto pi = p.pixel(i);
    auto hi = h.pixel(i);
    double total = 0.0;
    for (double v : hi) total += v;
    for (std::size_t k = 0; k < hi.size(); ++k) hi[k] -= pi[k] * total;
  }
}

inline LossAndGradient grad_source_ce(const Grid<double>& p, const LabelMap& y) {
  LossAndGradient r{source_ce_loss(p, y), Grid<double>(p.height, p.width, p.channels)};
  const double scale = 1.0 / static_cast<double>(y.pixels());
  for (std::size_t i = 0; i < y.pixels(); ++i) {
    const auto pi = p.pixel(i);
    auto gi = r.gradient.pixel(i);
    const std::size_t c = y.hard_class(i);
    for (std::size_t k = 0; k < pi.size(); ++k) gi[k] = pi[k] * scale;
    // Below the log clamp the loss is flat in p(c); only the -1 term needs care.
    if (pi[c] >= kProbEpsilon) {
      gi[c] -= scale;
    } else {
      for (std::size_t k = 0; k < pi.size(); ++k) gi[k] = 0.0;
    }
  }
  return r;
}

inline LossAndGradient grad_bootstrapped(const Grid<double>& p, const LabelMap& y, const ClassThresholds& lambda,
                                         double beta) {
  LossAndGradient r{bootstrapped_target_loss(p, y, lambda, beta), Grid<double>(p.height, p.width, p.channels)};
  const std::size_t labeled = y.labeled_count();
  if (labeled == 0) return r;
  const double scale = 1.0 / static_cast<double>(labeled);
  const std::size_t kk = p.channels;
  std::vector<double> target(kk);
  for (std::size_t i = 0; i < y.pixels(); ++i) {
    if (y.is_unlabeled(i)) continue;
    label_vector(y, i, target);
    const auto pi = p.pixel(i);
    auto hi = r.gradient.pixel(i);
    for (std::size_t k = 0; k < kk; ++k) {
      const double lam = static_cast<double>(lambda[k]);
      const double s = pi[k] / lam;
      const double inside = log_clamp_inactive(s) ? 1.0 : 0.0;
      // p_k * dL/dp_k, written to avoid dividing by p_k.
      hi[k] = -scale * (beta * target[k] * inside + (1.0 - beta) * s * (clamped_log(s) + inside));
    }
  }
  softmax_backward(p, r.gradient);
  return r;
}

inline LossAndGradient grad_mrkld(const Grid<double>& p, std::span<const std::uint8_t> mask) {
  LossAndGradient r{mrkld_regularizer(p, mask), Grid<double>(p.height, p.width, p.channels)};
  std::size_t labeled = 0;
  for (auto m : mask) labeled += m != 0;
  if (labeled == 0) return r;
  const double scale = 1.0 / static_cast<double>(labeled);
  const double inv_k = 1.0 / static_cast<double>(p.channels);
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    if (!mask[i]) continue;
    const auto pi = p.pixel(i);
    auto hi = r.gradient.pixel(i);
    for (std::size_t k = 0; k < pi.size(); ++k) hi[k] = pi[k] >= kProbEpsilon ? -scale * inv_k : 0.0;
  }
  softmax_backward(p, r.gradient);
  return r;
}

inline LossAndGradient grad_generator(const Grid<double>& p, const LogisticDiscriminator& disc) {
  const std::vector<double> feature = spatial_mean(weighted_self_information(p));
  const double d = disc(feature);
  LossAndGradient r{generator_adv_loss(d), Grid<double>(p.height, p.width, p.channels)};
  if (d < kDiscEpsilon || d > 1.0 - kDiscEpsilon) return r;
  if (disc.weights.size() != p.channels) fail_input("discriminator weight count does not match K");
  // dL/dm_k = -(1-d) w_k ; dm_k/dp_ik = -(log p_ik + 1) / N
  const double scale = (1.0 - d) / static_cast<double>(p.pixels());
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    const auto pi = p.pixel(i);
    auto hi = r.gradient.pixel(i);
    for (std::size_t k = 0; k < pi.size(); ++k) {
      hi[k] = pi[k] > 0.0 ? scale * disc.weights[k] * pi[k] * (std::log(pi[k]) + 1.0) : 0.0;
    }
  }
  softmax_backward(p, r.gradient);
  return r;
}

inline void add_scaled(LossAndGradient& into, const LossAndGradient& term, double weight) {
  into.loss += weight * term.loss;
  for (std::size_t i = 0; i < into.gradient.data.size(); ++i) into.gradient.data[i] += weight * term.gradient.data[i];
}

}  // namespace detail

/// Loss value and its gradient with respect to `logits` for the selected loss.
inline LossAndGradient loss_with_gradient(const Grid<double>& logits, const LossSelector& selector) {
  const Grid<double> p = softmax(logits);
  return std::visit(
      [&](const auto& sel) -> LossAndGradient {
        using S = std::decay_t<decltype(sel)>;
        if constexpr (std::is_same_v<S, loss::SourceCrossEntropy>) {
          return detail::grad_source_ce(p, sel.labels);
        } else if constexpr (std::is_same_v<S, loss::BootstrappedTarget>) {
          return detail::grad_bootstrapped(p, sel.labels, sel.thresholds, sel.beta);
        } else if constexpr (std::is_same_v<S, loss::Mrkld>) {
          return detail::grad_mrkld(p, sel.mask);
        } else if constexpr (std::is_same_v<S, loss::Phase1Target>) {
          sel.config.validate();
          auto r = detail::grad_bootstrapped(p, sel.labels, sel.thresholds, sel.config.beta);
          if (sel.config.regularizer == Regularizer::mrkld && sel.config.alpha_reg > 0.0) {
            const auto mask = labeled_mask(sel.labels);
            detail::add_scaled(r, detail::grad_mrkld(p, mask), sel.config.alpha_reg);
          }
          return r;
        } else if constexpr (std::is_same_v<S, loss::Phase2Easy>) {
          if (sel.labels.count(LabelKind::unlabeled) != 0) fail_input("easy-image labels must cover every pixel");
          return detail::grad_bootstrapped(p, sel.labels, sel.thresholds, sel.beta);
        } else {
          return detail::grad_generator(p, sel.discriminator);
        }
      },
      selector);
}

inline Grid<double> loss_gradient_logits(const Grid<double>& logits, const LossSelector& selector) {
  return loss_with_gradient(logits, selector).gradient;
}

// ProbabilityMap conveniences.
inline double source_ce_loss(const ProbabilityMap& m, const LabelMap& y) { return source_ce_loss(m.grid(), y); }
inline double bootstrapped_target_loss(const ProbabilityMap& m, const LabelMap& y, const ClassThresholds& lambda,
                                       double beta) {
  return bootstrapped_target_loss(m.grid(), y, lambda, beta);
}
inline double mrkld_regularizer(const ProbabilityMap& m, std::span<const std::uint8_t> mask) {
  return mrkld_regularizer(m.grid(), mask);
}
inline LossValue phase1_loss(const ProbabilityMap& source, const LabelMap& source_y, const ProbabilityMap& target,
                             const LabelMap& target_y, const ClassThresholds& lambda, const LossConfig& cfg) {
  return phase1_loss(source.grid(), source_y, target.grid(), target_y, lambda, cfg);
}
inline double phase2_easy_loss(const ProbabilityMap& m, const LabelMap& y, const ClassThresholds& lambda, double beta) {
  return phase2_easy_loss(m.grid(), y, lambda, beta);
}
inline Grid<float> weighted_self_information(const ProbabilityMap& m) { return weighted_self_information(m.grid()); }

}  // namespace densipl
