#pragma once

// Desk-scale two-phase self-training on synthetic data.
//
// The segmentation model is a per-pixel linear softmax over feature vectors
// and the intra-domain discriminator is a logistic regression over the
// spatial mean of the weighted self-information map. Everything is plain
// full-batch gradient descent and fully deterministic for a given seed.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "densipl/class_thresholds.hpp"
#include "densipl/confidence.hpp"
#include "densipl/config.hpp"
#include "densipl/error.hpp"
#include "densipl/label_map.hpp"
#include "densipl/losses.hpp"
#include "densipl/metrics.hpp"
#include "densipl/pseudolabel.hpp"
#include "densipl/synthetic.hpp"
#include "densipl/thresholding.hpp"
#include "densipl/voting.hpp"

namespace densipl {

/// Linear softmax classifier applied independently at every pixel.
struct PixelModel {
  std::size_t features = 0;
  std::size_t classes = 0;
  std::vector<double> weights;  // features x classes
  std::vector<double> bias;     // classes

  PixelModel() = default;
  PixelModel(std::size_t f, std::size_t k) : features(f), classes(k), weights(f * k, 0.0), bias(k, 0.0) {}

  static PixelModel random(std::size_t f, std::size_t k, std::uint64_t seed, double scale = 0.01) {
    PixelModel m(f, k);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> normal(0.0, scale);
    for (auto& w : m.weights) w = normal(rng);
    return m;
  }

  Grid<double> logits(const Grid<double>& x) const {
    if (x.channels != features) fail_input("feature dimension does not match model");
    Grid<double> z(x.height, x.width, classes);
    for (std::size_t i = 0; i < x.pixels(); ++i) {
      const auto xi = x.pixel(i);
      auto zi = z.pixel(i);
      std::copy(bias.begin(), bias.end(), zi.begin());
      for (std::size_t f = 0; f < features; ++f) {
        const double v = xi[f];
        const double* w = weights.data() + f * classes;
        for (std::size_t k = 0; k < classes; ++k) zi[k] += v * w[k];
      }
    }
    return z;
  }

  /// grad += scale * d(loss)/d(params) given d(loss)/d(logits) for input x.
  void add_gradient(const Grid<double>& x, const Grid<double>& dlogits, double scale, PixelModel& grad) const {
    for (std::size_t i = 0; i < x.pixels(); ++i) {
      const auto xi = x.pixel(i);
      const auto gi = dlogits.pixel(i);
      for (std::size_t k = 0; k < classes; ++k) grad.bias[k] += scale * gi[k];
      for (std::size_t f = 0; f < features; ++f) {
        const double v = scale * xi[f];
        double* g = grad.weights.data() + f * classes;
        for (std::size_t k = 0; k < classes; ++k) g[k] += v * gi[k];
      }
    }
  }

  void descend(const PixelModel& grad, double lr) {
    for (std::size_t i = 0; i < weights.size(); ++i) weights[i] -= lr * grad.weights[i];
    for (std::size_t k = 0; k < classes; ++k) bias[k] -= lr * grad.bias[k];
  }

  bool finite() const {
    for (double w : weights) if (!std::isfinite(w)) return false;
    for (double b : bias) if (!std::isfinite(b)) return false;
    return true;
  }
};

using ToyDiscriminator = LogisticDiscriminator;

struct ToyTrainConfig {
  PipelineConfig pipeline;
  std::size_t pretrain_steps = 300;
  std::size_t steps_per_round = 200;
  double lr = 0.1;
  double disc_lr = 0.5;
  double adv_weight = 0.1;
  /// Also train hard images on their sparse pseudo labels during phase 2.
  bool hard_sparse_supervision = false;

  void validate() const {
    pipeline.validate();
    if (!(lr > 0.0) || !(disc_lr > 0.0)) fail_input("learning rates must be positive");
    if (!(adv_weight >= 0.0)) fail_input("adv_weight must be >= 0");
  }
};

struct RoundRecord {
  std::size_t round = 0;
  int phase = 1;
  double p = 0.0;
  std::optional<double> q;
  std::vector<float> lambdas;
  double labeled_fraction_before = 0.0;
  double labeled_fraction_after = 0.0;
  LossValue losses;
  std::optional<double> discriminator_loss;
  double target_miou = 0.0;
  double target_r_miou = 0.0;
  std::optional<double> easy_label_accuracy;
  std::optional<double> hard_label_accuracy;
};

struct TrainReport {
  std::string method;
  std::uint64_t seed = 0;
  double pretrain_target_miou = 0.0;
  std::vector<RoundRecord> rounds;
  double source_miou = 0.0;
  double target_miou = 0.0;
  double target_r_miou = 0.0;
};

enum class BaselineMode { source_only, sparse_st };

namespace detail {

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline void check_finite(double loss, const PixelModel& m, const std::string& where) {
  if (!std::isfinite(loss) || !m.finite()) {
    throw Error(ErrorKind::divergence, "training diverged (non-finite loss or parameters) during " + where);
  }
}

class ToyTrainer {
 public:
  ToyTrainer(const SyntheticDomains& data, const ToyTrainConfig& cfg, std::uint64_t seed)
      : source_(data.source),
        target_(data.target),
        cfg_(cfg),
        evaluator_(data.target_truth, data.num_classes, data.rare_classes),
        model_(PixelModel::random(data.feature_dim, data.num_classes, seed)),
        k_(data.num_classes) {
    cfg_.validate();
    if (source_.empty() || target_.empty()) fail_input("toy training needs source and target images");
  }

  /// Gradient descent on the source cross-entropy only.
  void train_source(std::size_t steps) {
    for (std::size_t s = 0; s < steps; ++s) {
      PixelModel grad(model_.features, model_.classes);
      const double loss = accumulate_source(grad, 1.0);
      model_.descend(grad, cfg_.lr);
      check_finite(loss, model_, "source training");
      last_losses_ = LossValue{};
      last_losses_.source_ce = loss;
    }
  }

  /// Source CE plus the phase-1 target objective on the given labels.
  void train_phase1(const std::vector<LabelMap>& labels, const ClassThresholds& lambda, const LossConfig& loss_cfg) {
    for (std::size_t s = 0; s < cfg_.steps_per_round; ++s) {
      PixelModel grad(model_.features, model_.classes);
      LossValue v;
      v.source_ce = accumulate_source(grad, 1.0);
      double boot = 0.0, reg = 0.0;
      const double scale = 1.0 / static_cast<double>(target_.size());
      for (std::size_t t = 0; t < target_.size(); ++t) {
        const Grid<double> z = model_.logits(target_[t].features);
        const auto lg = loss_with_gradient(z, loss::Phase1Target{labels[t], lambda, loss_cfg});
        if (s + 1 == cfg_.steps_per_round) {
          const double b = bootstrapped_target_loss(softmax(z), labels[t], lambda, loss_cfg.beta);
          boot += scale * b;
          reg += scale * (lg.loss - b);
        } else {
          boot += scale * lg.loss;
        }
        model_.add_gradient(target_[t].features, lg.gradient, scale, grad);
      }
      v.target_bootstrap = boot;
      if (loss_cfg.regularizer == Regularizer::mrkld) v.regularizer = reg;
      model_.descend(grad, cfg_.lr);
      check_finite(v.total(), model_, "phase-1 training");
      last_losses_ = v;
    }
  }

  /// Easy images on full labels, hard images through the discriminator.
  /// Returns the final discriminator loss.
  double train_phase2(const std::vector<std::size_t>& easy, const std::vector<std::size_t>& hard,
                      const std::vector<LabelMap>& easy_labels, const std::vector<LabelMap>& hard_labels,
                      const ClassThresholds& lambda) {
    const PipelineConfig& pc = cfg_.pipeline;
    double disc_loss = 0.0;
    for (std::size_t s = 0; s < cfg_.steps_per_round; ++s) {
      std::vector<Grid<double>> logits(target_.size());
      for (std::size_t t : easy) logits[t] = model_.logits(target_[t].features);
      for (std::size_t t : hard) logits[t] = model_.logits(target_[t].features);

      // Discriminator: easy -> 1, hard -> 0.
      if (!hard.empty() && !easy.empty()) {
        std::vector<std::vector<double>> f_easy, f_hard;
        for (std::size_t t : easy) f_easy.push_back(spatial_mean(weighted_self_information(softmax(logits[t]))));
        for (std::size_t t : hard) f_hard.push_back(spatial_mean(weighted_self_information(softmax(logits[t]))));
        const auto dg = discriminator_loss_with_gradient(disc_, f_easy, f_hard);
        disc_loss = dg.loss;
        for (std::size_t k = 0; k < k_; ++k) disc_.weights[k] -= cfg_.disc_lr * dg.gradient.weights[k];
        disc_.bias -= cfg_.disc_lr * dg.gradient.bias;
      }

      PixelModel grad(model_.features, model_.classes);
      LossValue v;
      if (!easy.empty()) {
        const double scale = 1.0 / static_cast<double>(easy.size());
        double boot = 0.0;
        for (std::size_t n = 0; n < easy.size(); ++n) {
          const std::size_t t = easy[n];
          const auto lg = loss_with_gradient(logits[t], loss::Phase2Easy{easy_labels[n], lambda, pc.beta});
          boot += scale * lg.loss;
          model_.add_gradient(target_[t].features, lg.gradient, scale, grad);
        }
        v.target_bootstrap = boot;
      }
      if (!hard.empty() && !easy.empty() && cfg_.adv_weight > 0.0) {
        const double scale = cfg_.adv_weight / static_cast<double>(hard.size());
        double adv = 0.0;
        for (std::size_t t : hard) {
          const auto lg = loss_with_gradient(logits[t], loss::GeneratorAdversarial{disc_});
          adv += scale * lg.loss;
          model_.add_gradient(target_[t].features, lg.gradient, scale, grad);
        }
        v.adversarial = adv;
      }
      if (cfg_.hard_sparse_supervision && !hard.empty()) {
        const double scale = 1.0 / static_cast<double>(hard.size());
        double boot = 0.0;
        for (std::size_t n = 0; n < hard.size(); ++n) {
          const auto lg = loss_with_gradient(logits[hard[n]], loss::Phase1Target{hard_labels[n], lambda, pc.loss()});
          boot += scale * lg.loss;
          model_.add_gradient(target_[hard[n]].features, lg.gradient, scale, grad);
        }
        v.target_bootstrap = v.target_bootstrap.value_or(0.0) + boot;
      }
      model_.descend(grad, cfg_.lr);
      check_finite(v.total() + disc_loss, model_, "phase-2 training");
      last_losses_ = v;
    }
    return disc_loss;
  }

  std::vector<ProbabilityMap> target_probabilities() const {
    std::vector<ProbabilityMap> maps;
    maps.reserve(target_.size());
    for (const auto& t : target_) maps.push_back(probability_map_from_logits(model_.logits(t.features)));
    return maps;
  }

  MiouResult evaluate_target() const {
    std::vector<LabelMap> preds;
    for (const auto& t : target_) preds.push_back(argmax_labels(model_.logits(t.features)));
    return evaluator_.evaluate(preds);
  }

  double evaluate_source() const {
    ConfusionMatrix cm(k_);
    for (const auto& s : source_) cm.add(argmax_labels(model_.logits(s.features)), s.labels);
    return cm.result({}).miou;
  }

  const Evaluator& evaluator() const { return evaluator_; }
  const LossValue& last_losses() const { return last_losses_; }
  const ToyTrainConfig& config() const { return cfg_; }
  std::size_t target_count() const { return target_.size(); }

 private:
  double accumulate_source(PixelModel& grad, double weight) {
    const double scale = weight / static_cast<double>(source_.size());
    double loss = 0.0;
    for (const auto& s : source_) {
      const auto lg = loss_with_gradient(model_.logits(s.features), loss::SourceCrossEntropy{s.labels});
      loss += scale * lg.loss;
      model_.add_gradient(s.features, lg.gradient, scale, grad);
    }
    return loss;
  }

  const std::vector<SourceImage>& source_;
  const std::vector<TargetImage>& target_;
  ToyTrainConfig cfg_;
  Evaluator evaluator_;
  PixelModel model_;
  std::size_t k_;
  ToyDiscriminator disc_{std::vector<double>(k_, 0.0), 0.0};
  LossValue last_losses_;
};

inline double labeled_fraction(const std::vector<LabelMap>& labels) {
  std::size_t labeled = 0, total = 0;
  for (const auto& l : labels) {
    labeled += l.labeled_count();
    total += l.pixels();
  }
  return total ? static_cast<double>(labeled) / static_cast<double>(total) : 0.0;
}

inline ClassThresholds round_thresholds(const std::vector<ProbabilityMap>& maps, double p) {
  return compute_thresholds(collect_class_max_probs(maps), p);
}

inline void finish_round(ToyTrainer& trainer, RoundRecord& rec) {
  const auto m = trainer.evaluate_target();
  rec.target_miou = m.miou;
  rec.target_r_miou = m.r_miou;
  rec.losses = trainer.last_losses();
}

/// One self-training round on (optionally densified) sparse labels.
inline RoundRecord phase1_round(ToyTrainer& trainer, std::size_t round, bool densify_labels, const LossConfig& loss_cfg) {
  const PipelineConfig& pc = trainer.config().pipeline;
  RoundRecord rec;
  rec.round = round;
  rec.phase = 1;
  rec.p = pc.portion(round);
  const auto maps = trainer.target_probabilities();
  const ClassThresholds lambda = round_thresholds(maps, rec.p);
  rec.lambdas.assign(lambda.lambdas().begin(), lambda.lambdas().end());

  std::vector<LabelMap> labels;
  for (const auto& m : maps) labels.push_back(generate_sparse(m, lambda));
  rec.labeled_fraction_before = labeled_fraction(labels);
  if (densify_labels) {
    for (std::size_t t = 0; t < maps.size(); ++t) {
      labels[t] = densify_from(normalized_scores(maps[t], lambda), std::move(labels[t]), pc.voting());
    }
  }
  rec.labeled_fraction_after = labeled_fraction(labels);

  trainer.train_phase1(labels, lambda, loss_cfg);
  finish_round(trainer, rec);
  return rec;
}

inline RoundRecord phase2_round(ToyTrainer& trainer, std::size_t round, std::size_t phase2_index) {
  const PipelineConfig& pc = trainer.config().pipeline;
  RoundRecord rec;
  rec.round = round;
  rec.phase = 2;
  rec.p = pc.portion(round);
  rec.q = schedule_q(phase2_index, pc.q_schedule());
  const auto maps = trainer.target_probabilities();
  const ClassThresholds lambda = round_thresholds(maps, rec.p);
  rec.lambdas.assign(lambda.lambdas().begin(), lambda.lambdas().end());

  std::vector<ConfidenceReport> reports;
  for (std::size_t t = 0; t < maps.size(); ++t) {
    reports.push_back(confidence_score(maps[t], lambda, std::to_string(t), pc.conf_denominator));
  }
  // Ids are zero-padded so lexicographic tie-breaks follow image order.
  for (auto& r : reports) r.id = std::string(8 - std::min<std::size_t>(8, r.id.size()), '0') + r.id;
  const EasyHardSplit split = split_easy_hard(reports, *rec.q);

  std::vector<std::size_t> easy, hard;
  for (const auto& id : split.easy) easy.push_back(std::stoul(id));
  for (const auto& id : split.hard) hard.push_back(std::stoul(id));

  std::vector<LabelMap> easy_labels, hard_labels;
  std::vector<double> easy_acc, hard_acc;
  std::size_t labeled = 0, total = 0;
  for (std::size_t t : easy) {
    easy_labels.push_back(generate_full_calibrated(maps[t], lambda, pc.calibration()));
    easy_acc.push_back(trainer.evaluator().pseudo_label_accuracy(t, easy_labels.back()));
    labeled += easy_labels.back().labeled_count();
    total += maps[t].pixels();
  }
  for (std::size_t t : hard) {
    // Accuracy of the labels these images would receive if they were easy.
    hard_acc.push_back(trainer.evaluator().pseudo_label_accuracy(
        t, generate_full_calibrated(maps[t], lambda, pc.calibration())));
    hard_labels.push_back(generate_sparse(maps[t], lambda));
    if (trainer.config().hard_sparse_supervision) labeled += hard_labels.back().labeled_count();
    total += maps[t].pixels();
  }
  rec.easy_label_accuracy = mean_of(easy_acc);
  if (!hard.empty()) rec.hard_label_accuracy = mean_of(hard_acc);
  rec.labeled_fraction_before = rec.labeled_fraction_after =
      total ? static_cast<double>(labeled) / static_cast<double>(total) : 0.0;

  rec.discriminator_loss = trainer.train_phase2(easy, hard, easy_labels, hard_labels, lambda);
  finish_round(trainer, rec);
  return rec;
}

inline void finish_report(const ToyTrainer& trainer, TrainReport& report) {
  const auto m = trainer.evaluate_target();
  report.target_miou = m.miou;
  report.target_r_miou = m.r_miou;
  report.source_miou = trainer.evaluate_source();
}

}  // namespace detail

/// Baselines: source-only training, or class-balanced sparse self-training
/// (cross-entropy on sparse thresholded labels, beta = 1, no voting) for the same
/// number of rounds as the two-phase schedule.
inline TrainReport train_baseline(const SyntheticDomains& data, BaselineMode mode, const ToyTrainConfig& cfg,
                                  std::uint64_t seed) {
  detail::ToyTrainer trainer(data, cfg, seed);
  TrainReport report;
  report.method = mode == BaselineMode::source_only ? "source_only" : "sparse_st";
  report.seed = seed;
  trainer.train_source(cfg.pretrain_steps);
  report.pretrain_target_miou = trainer.evaluate_target().miou;

  const std::size_t rounds = cfg.pipeline.phase1_rounds + cfg.pipeline.phase2_rounds;
  if (mode == BaselineMode::source_only) {
    for (std::size_t r = 0; r < rounds; ++r) {
      RoundRecord rec;
      rec.round = r;
      rec.phase = 0;
      trainer.train_source(cfg.steps_per_round);
      detail::finish_round(trainer, rec);
      report.rounds.push_back(rec);
    }
  } else {
    LossConfig loss_cfg = cfg.pipeline.loss();
    loss_cfg.beta = 1.0;
    for (std::size_t r = 0; r < rounds; ++r) report.rounds.push_back(detail::phase1_round(trainer, r, false, loss_cfg));
  }
  detail::finish_report(trainer, report);
  return report;
}

/// Full two-phase schedule: phase1_rounds of voting-densified self-training,
/// then phase2_rounds of easy/hard training with intra-domain adversarial
/// alignment.
inline TrainReport train_tpld(const SyntheticDomains& data, const ToyTrainConfig& cfg, std::uint64_t seed) {
  detail::ToyTrainer trainer(data, cfg, seed);
  TrainReport report;
  report.method = "tpld";
  report.seed = seed;
  trainer.train_source(cfg.pretrain_steps);
  report.pretrain_target_miou = trainer.evaluate_target().miou;

  const PipelineConfig& pc = cfg.pipeline;
  for (std::size_t r = 0; r < pc.phase1_rounds; ++r) {
    report.rounds.push_back(detail::phase1_round(trainer, r, true, pc.loss()));
  }
  for (std::size_t r2 = 0; r2 < pc.phase2_rounds; ++r2) {
    report.rounds.push_back(detail::phase2_round(trainer, pc.phase1_rounds + r2, r2));
  }
  detail::finish_report(trainer, report);
  return report;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const RoundRecord& r) {
  nlohmann::json j = {{"round", r.round},
                      {"phase", r.phase},
                      {"p", r.p},
                      {"lambdas", r.lambdas},
                      {"labeled_fraction_before", r.labeled_fraction_before},
                      {"labeled_fraction_after", r.labeled_fraction_after},
                      {"losses", to_json(r.losses)},
                      {"target_miou", r.target_miou},
                      {"target_r_miou", r.target_r_miou}};
  if (r.q) j["q"] = *r.q;
  if (r.discriminator_loss) j["discriminator_loss"] = *r.discriminator_loss;
  if (r.easy_label_accuracy) j["easy_label_accuracy"] = *r.easy_label_accuracy;
  if (r.hard_label_accuracy) j["hard_label_accuracy"] = *r.hard_label_accuracy;
  return j;
}

inline nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& rec : r.rounds) rounds.push_back(to_json(rec));
  return {{"method", r.method},
          {"seed", r.seed},
          {"pretrain_target_miou", r.pretrain_target_miou},
          {"rounds", rounds},
          {"source_miou", r.source_miou},
          {"target_miou", r.target_miou},
          {"target_r_miou", r.target_r_miou}};
}

/// The dataset seed is not read here; callers take it from the pipeline seed.
inline SyntheticDatasetConfig synthetic_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail_input("'dataset' must be a JSON object");
  SyntheticDatasetConfig c;
  std::set<std::string> known;
  using detail::read_key;
  read_key(j, "images_per_domain", c.images_per_domain, known);
  read_key(j, "height", c.height, known);
  read_key(j, "width", c.width, known);
  read_key(j, "num_classes", c.num_classes, known);
  read_key(j, "feature_dim", c.feature_dim, known);
  read_key(j, "shift", c.shift, known);
  read_key(j, "balance", c.balance, known);
  read_key(j, "smoothing_radius", c.smoothing_radius, known);
  read_key(j, "noise", c.noise, known);
  read_key(j, "contrast_jitter", c.contrast_jitter, known);
  read_key(j, "prototype_scale", c.prototype_scale, known);
  read_key(j, "rare_balance", c.rare_balance, known);
  detail::reject_unknown(j, known, "toy.dataset");
  c.validate();
  return c;
}

/// Training knobs; the pipeline part is supplied separately.
inline ToyTrainConfig toy_train_config_from_json(const nlohmann::json& j, const PipelineConfig& pipeline) {
  if (!j.is_object()) fail_input("'training' must be a JSON object");
  ToyTrainConfig c;
  c.pipeline = pipeline;
  std::set<std::string> known;
  using detail::read_key;
  read_key(j, "pretrain_steps", c.pretrain_steps, known);
  read_key(j, "steps_per_round", c.steps_per_round, known);
  read_key(j, "lr", c.lr, known);
  read_key(j, "disc_lr", c.disc_lr, known);
  read_key(j, "adv_weight", c.adv_weight, known);
  read_key(j, "hard_sparse_supervision", c.hard_sparse_supervision, known);
  detail::reject_unknown(j, known, "toy.training");
  c.validate();
  return c;
}

/// Dataset and training settings of the `toy` config section.
struct ToySettings {
  SyntheticDatasetConfig dataset;
  ToyTrainConfig training;
};

inline ToySettings toy_settings_from_json(const nlohmann::json& toy, const PipelineConfig& pipeline) {
  if (!toy.is_object()) fail_input("'toy' must be a JSON object");
  for (const auto& [key, _] : toy.items()) {
    if (key != "dataset" && key != "training") fail_input("unknown config key '" + key + "' in toy");
  }
  ToySettings s;
  s.dataset = toy.contains("dataset") ? synthetic_config_from_json(toy["dataset"]) : SyntheticDatasetConfig{};
  s.training = toy.contains("training") ? toy_train_config_from_json(toy["training"], pipeline) : ToyTrainConfig{};
  s.training.pipeline = pipeline;
  return s;
}

}  // namespace densipl
