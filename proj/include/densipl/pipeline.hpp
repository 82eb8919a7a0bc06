#pragma once

// Directory-level pipeline stages over DPLT probability maps.
//
// Output layout under --out:
//   thresholds.json           class thresholds for the round
//   sparse/<id>.dplt          sparse pseudo labels
//   labels/<id>.dplt          voting-densified labels
//   labels/iter<N>/<id>.dplt  per-iteration dumps (--dump-iterations)
//   confidence.jsonl          one confidence record per image
//   split.json                easy/hard split
//   full_labels/<id>.dplt     calibrated full labels of easy images
//   losses.json, it_maps/     per-image loss values and I_t maps
//   report.json               round / demo summary

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "densipl/class_thresholds.hpp"
#include "densipl/confidence.hpp"
#include "densipl/config.hpp"
#include "densipl/error.hpp"
#include "densipl/label_map.hpp"
#include "densipl/losses.hpp"
#include "densipl/pseudolabel.hpp"
#include "densipl/tensor.hpp"
#include "densipl/thresholding.hpp"
#include "densipl/toytrain.hpp"
#include "densipl/voting.hpp"

namespace densipl {

namespace fs = std::filesystem;

struct ManifestEntry {
  std::string id;
  fs::path probs;
  std::optional<fs::path> gt;
};

struct Manifest {
  fs::path root;
  std::size_t num_classes = 0;
  std::vector<ManifestEntry> images;
};

namespace detail {

inline void check_image_id(const std::string& id) {
  if (id.empty() || id == "." || id == ".." || id.find_first_of("/\\") != std::string::npos) {
    fail_input("image id '" + id + "' is not a valid file name");
  }
}

}  // namespace detail

/// Relative paths resolve against `root`; a relative root resolves against
/// the manifest's directory.
inline Manifest manifest_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  if (!j.is_object()) fail_input("manifest must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "root" && key != "num_classes" && key != "images") fail_input("unknown manifest key '" + key + "'");
  }
  if (!j.contains("num_classes") || !j["num_classes"].is_number_integer() || j["num_classes"].get<std::int64_t>() < 0) {
    fail_input("manifest needs a non-negative integer 'num_classes'");
  }
  if (!j.contains("images") || !j["images"].is_array()) fail_input("manifest needs an 'images' array");
  Manifest m;
  m.num_classes = j["num_classes"].get<std::size_t>();
  if (m.num_classes == 0) fail_input("manifest num_classes must be positive");
  m.root = base_dir;
  if (j.contains("root")) {
    if (!j["root"].is_string()) fail_input("manifest 'root' must be a string");
    const fs::path r = j["root"].get<std::string>();
    m.root = r.is_absolute() ? r : base_dir / r;
  }
  std::set<std::string> seen;
  for (const auto& e : j["images"]) {
    if (!e.is_object() || !e.contains("id") || !e.contains("probs") || !e["id"].is_string() ||
        !e["probs"].is_string()) {
      fail_input("manifest images need string 'id' and 'probs'");
    }
    for (const auto& [key, _] : e.items()) {
      if (key != "id" && key != "probs" && key != "gt") fail_input("unknown manifest image key '" + key + "'");
    }
    ManifestEntry entry;
    entry.id = e["id"].get<std::string>();
    detail::check_image_id(entry.id);
    if (!seen.insert(entry.id).second) fail_input("duplicate image id '" + entry.id + "' in manifest");
    const fs::path probs = e["probs"].get<std::string>();
    entry.probs = probs.is_absolute() ? probs : m.root / probs;
    if (e.contains("gt")) {
      if (!e["gt"].is_string()) fail_input("manifest 'gt' must be a string");
      const fs::path gt = e["gt"].get<std::string>();
      entry.gt = gt.is_absolute() ? gt : m.root / gt;
    }
    m.images.push_back(std::move(entry));
  }
  if (m.images.empty()) fail_input("manifest lists no images");
  return m;
}

inline Manifest load_manifest(const fs::path& path) {
  return manifest_from_json(read_json_file(path), path.parent_path());
}

enum class Stage { thresholds, sparse, densify, confidence, split, full_labels, losses, round, demo };

inline const std::vector<std::pair<std::string, Stage>>& stage_names() {
  static const std::vector<std::pair<std::string, Stage>> names = {
      {"thresholds", Stage::thresholds}, {"sparse", Stage::sparse},           {"densify", Stage::densify},
      {"confidence", Stage::confidence}, {"split", Stage::split},             {"full-labels", Stage::full_labels},
      {"losses", Stage::losses},         {"round", Stage::round},             {"demo", Stage::demo}};
  return names;
}

inline Stage parse_stage(const std::string& name) {
  for (const auto& [n, s] : stage_names()) {
    if (n == name) return s;
  }
  fail_input("unknown stage '" + name + "'");
}

/// Pipeline settings plus the optional `toy` section used by `demo`.
struct RunConfig {
  PipelineConfig pipeline;
  nlohmann::json toy = nlohmann::json::object();
};

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  c.pipeline = pipeline_config_from_json(j, {"toy"});
  if (j.contains("toy")) c.toy = j["toy"];
  apply_seed_override(c.pipeline);
  return c;
}

inline RunConfig load_run_config(const std::optional<fs::path>& path) {
  return run_config_from_json(path ? read_json_file(*path) : nlohmann::json::object());
}

struct StageOptions {
  fs::path out;
  std::size_t round = 0;
  std::size_t threads = 1;
  bool dump_iterations = false;
};

/// Runs fn(i) for i in [0, n) on up to `threads` workers. If any call throws,
/// the exception of the lowest failing index is rethrown.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  std::vector<std::exception_ptr> errors(n);
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

namespace detail {

inline fs::path label_path(const fs::path& dir, const std::string& id) { return dir / (id + ".dplt"); }

/// Runs `fn` and tags any densipl::Error it throws with `id`.
template <class Fn>
auto for_image(const std::string& id, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    if (!e.image_id().empty()) throw;
    throw e.with_image(id);
  }
}

inline ProbabilityMap load_probs(const ManifestEntry& e, std::size_t k) {
  return for_image(e.id, [&] {
    if (!fs::exists(e.probs)) fail_input("missing probability map '" + e.probs.string() + "'");
    ProbabilityMap m = validate_probability_map(load_tensor(e.probs));
    if (m.num_classes() != k) {
      fail_input("map has " + std::to_string(m.num_classes()) + " classes, manifest says " + std::to_string(k));
    }
    return m;
  });
}

inline LabelMap load_labels(const fs::path& path, const std::string& id, std::size_t k, const char* produced_by) {
  return for_image(id, [&] {
    if (!fs::exists(path)) {
      fail_input("missing '" + path.string() + "'; run the " + produced_by + " stage first");
    }
    return load_label_map(path, k);
  });
}

inline ClassThresholds read_thresholds(const fs::path& out) {
  const fs::path p = out / "thresholds.json";
  if (!fs::exists(p)) fail_input("missing '" + p.string() + "'; run the thresholds stage first");
  return thresholds_from_json(read_json_file(p));
}

inline double fraction(std::size_t num, std::size_t den) {
  return den ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
}

}  // namespace detail

/// Executes pipeline stages for one manifest/config/output directory.
class PipelineRunner {
 public:
  PipelineRunner(Manifest manifest, RunConfig config, StageOptions options)
      : manifest_(std::move(manifest)), config_(std::move(config)), opt_(std::move(options)) {
    config_.pipeline.validate();
  }

  const PipelineConfig& pipeline() const { return config_.pipeline; }

  double portion() const { return config_.pipeline.portion(opt_.round); }
  double q() const { return config_.pipeline.q(opt_.round); }
  bool phase_two() const { return opt_.round >= config_.pipeline.phase1_rounds; }

  void run(Stage stage) {
    fs::create_directories(opt_.out);
    switch (stage) {
      case Stage::thresholds: thresholds(); break;
      case Stage::sparse: sparse(); break;
      case Stage::densify: densify_stage(); break;
      case Stage::confidence: confidence(); break;
      case Stage::split: split(); break;
      case Stage::full_labels: full_labels(); break;
      case Stage::losses: losses(); break;
      case Stage::round: round(); break;
      case Stage::demo: demo(); break;
    }
  }

  ClassThresholds thresholds() {
    ClassConfidencePool pool(manifest_.num_classes);
    std::vector<ClassConfidencePool> parts(manifest_.images.size(), ClassConfidencePool(manifest_.num_classes));
    parallel_for(manifest_.images.size(), opt_.threads, [&](std::size_t i) {
      parts[i].accumulate(detail::load_probs(manifest_.images[i], manifest_.num_classes));
    });
    for (const auto& part : parts) pool.merge(part);  // manifest order keeps the pool deterministic
    const ClassThresholds lambda = compute_thresholds(pool, portion());
    write_file_atomic(opt_.out / "thresholds.json", dump_json(to_json(lambda)));
    return lambda;
  }

  void sparse() {
    const ClassThresholds lambda = detail::read_thresholds(opt_.out);
    fs::create_directories(opt_.out / "sparse");
    for_each_image([&](const ManifestEntry& e) {
      const ProbabilityMap m = detail::load_probs(e, manifest_.num_classes);
      save_label_map(generate_sparse(m, lambda), detail::label_path(opt_.out / "sparse", e.id));
    });
  }

  void densify_stage() {
    const ClassThresholds lambda = detail::read_thresholds(opt_.out);
    const VotingConfig vcfg = config_.pipeline.voting();
    fs::create_directories(opt_.out / "labels");
    if (opt_.dump_iterations) {
      for (std::size_t it = 1; it <= vcfg.iterations; ++it) {
        fs::create_directories(opt_.out / "labels" / ("iter" + std::to_string(it)));
      }
    }
    for_each_image([&](const ManifestEntry& e) {
      const ProbabilityMap m = detail::load_probs(e, manifest_.num_classes);
      LabelMap labels =
          detail::load_labels(detail::label_path(opt_.out / "sparse", e.id), e.id, manifest_.num_classes, "sparse");
      VotingObserver observer;
      if (opt_.dump_iterations) {
        observer = [&](std::size_t it, const LabelMap& l) {
          save_label_map(l, detail::label_path(opt_.out / "labels" / ("iter" + std::to_string(it)), e.id));
        };
      }
      const LabelMap dense = detail::for_image(
          e.id, [&] { return densify_from(normalized_scores(m, lambda), std::move(labels), vcfg, observer); });
      save_label_map(dense, detail::label_path(opt_.out / "labels", e.id));
    });
  }

  std::vector<ConfidenceReport> confidence() {
    const ClassThresholds lambda = detail::read_thresholds(opt_.out);
    std::vector<ConfidenceReport> reports(manifest_.images.size());
    parallel_for(manifest_.images.size(), opt_.threads, [&](std::size_t i) {
      const auto& e = manifest_.images[i];
      const ProbabilityMap m = detail::load_probs(e, manifest_.num_classes);
      reports[i] = confidence_score(m, lambda, e.id, config_.pipeline.conf_denominator);
    });
    std::string text;
    for (const auto& r : reports) text += to_json(r).dump() + "\n";
    write_file_atomic(opt_.out / "confidence.jsonl", text);
    return reports;
  }

  EasyHardSplit split() {
    const fs::path path = opt_.out / "confidence.jsonl";
    if (!fs::exists(path)) fail_input("missing '" + path.string() + "'; run the confidence stage first");
    std::vector<ConfidenceReport> reports;
    std::istringstream in(std::string(reinterpret_cast<const char*>(read_file_bytes(path).data()),
                                      fs::file_size(path)));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      try {
        reports.push_back(confidence_report_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::exception& ex) {
        fail_input("bad confidence record in '" + path.string() + "': " + ex.what());
      }
    }
    const EasyHardSplit s = split_easy_hard(reports, q());
    write_file_atomic(opt_.out / "split.json", dump_json(to_json(s)));
    return s;
  }

  void full_labels() {
    const ClassThresholds lambda = detail::read_thresholds(opt_.out);
    const EasyHardSplit s = read_split();
    const std::set<std::string> easy(s.easy.begin(), s.easy.end());
    fs::create_directories(opt_.out / "full_labels");
    for_each_image([&](const ManifestEntry& e) {
      if (!easy.count(e.id)) return;
      const ProbabilityMap m = detail::load_probs(e, manifest_.num_classes);
      const LabelMap full =
          detail::for_image(e.id, [&] { return generate_full_calibrated(m, lambda, config_.pipeline.calibration()); });
      save_label_map(full, detail::label_path(opt_.out / "full_labels", e.id));
    });
  }

  /// Per-image target losses on the densified labels (phase 1) or on the
  /// full labels of easy images (phase 2), plus each image's I_t map.
  nlohmann::json losses() {
    const ClassThresholds lambda = detail::read_thresholds(opt_.out);
    const PipelineConfig& pc = config_.pipeline;
    std::set<std::string> easy;
    const bool two = phase_two();
    if (two) {
      const EasyHardSplit s = read_split();
      easy.insert(s.easy.begin(), s.easy.end());
    }
    fs::create_directories(opt_.out / "it_maps");
    std::vector<nlohmann::json> records(manifest_.images.size());
    parallel_for(manifest_.images.size(), opt_.threads, [&](std::size_t i) {
      const auto& e = manifest_.images[i];
      const ProbabilityMap m = detail::load_probs(e, manifest_.num_classes);
      nlohmann::json rec = {{"id", e.id}};
      detail::for_image(e.id, [&] {
        if (!two) {
          const LabelMap y = detail::load_labels(detail::label_path(opt_.out / "labels", e.id), e.id,
                                                 manifest_.num_classes, "densify");
          const auto mask = labeled_mask(y);
          LossValue v;
          v.target_bootstrap = bootstrapped_target_loss(m, y, lambda, pc.beta);
          if (pc.regularizer == Regularizer::mrkld) v.regularizer = pc.alpha_reg * mrkld_regularizer(m, mask);
          rec["phase1"] = to_json(v);
        } else if (easy.count(e.id)) {
          const LabelMap y = detail::load_labels(detail::label_path(opt_.out / "full_labels", e.id), e.id,
                                                 manifest_.num_classes, "full-labels");
          LossValue v;
          v.target_bootstrap = phase2_easy_loss(m, y, lambda, pc.beta);
          rec["phase2_easy"] = to_json(v);
        }
        if (e.gt) {
          const LabelMap gt = detail::load_labels(*e.gt, e.id, manifest_.num_classes, "ground-truth");
          rec["source_ce"] = source_ce_loss(m, gt);
        }
        save_tensor(to_tensor(weighted_self_information(m)), detail::label_path(opt_.out / "it_maps", e.id));
        return 0;
      });
      records[i] = std::move(rec);
    });
    nlohmann::json j = {{"round", opt_.round}, {"phase", two ? 2 : 1}, {"images", records}};
    write_file_atomic(opt_.out / "losses.json", dump_json(j));
    return j;
  }

  /// One full round: thresholds, sparse labels, then voting (phase 1) or
  /// confidence, split and full labels (phase 2), then losses.
  nlohmann::json round() {
    const ClassThresholds lambda = thresholds();
    sparse();
    nlohmann::json report = {{"round", opt_.round},
                             {"phase", phase_two() ? 2 : 1},
                             {"p", portion()},
                             {"lambdas", lambda.lambdas()}};
    const auto counts = count_labels("sparse");
    report["labeled_fraction_sparse"] = detail::fraction(counts.first, counts.second);
    if (!phase_two()) {
      densify_stage();
      const auto dense = count_labels("labels");
      report["labeled_fraction_densified"] = detail::fraction(dense.first, dense.second);
    } else {
      confidence();
      const EasyHardSplit s = split();
      full_labels();
      report["q"] = s.q;
      report["easy"] = s.easy;
      report["hard"] = s.hard;
    }
    const nlohmann::json l = losses();
    report["losses"] = l["images"];
    write_file_atomic(opt_.out / "report.json", dump_json(report));
    return report;
  }

  /// Toy end-to-end run of both baselines and the two-phase schedule.
  nlohmann::json demo() {
    const ToySettings toy = toy_settings_from_json(config_.toy, config_.pipeline);
    SyntheticDatasetConfig dcfg = toy.dataset;
    dcfg.seed = config_.pipeline.seed;
    const SyntheticDomains data = make_synthetic_domains(dcfg);
    const std::uint64_t seed = config_.pipeline.seed;
    nlohmann::json report = {
        {"seed", seed},
        {"source_only", to_json(train_baseline(data, BaselineMode::source_only, toy.training, seed))},
        {"sparse_st", to_json(train_baseline(data, BaselineMode::sparse_st, toy.training, seed))},
        {"tpld", to_json(train_tpld(data, toy.training, seed))}};
    write_file_atomic(opt_.out / "report.json", dump_json(report));
    return report;
  }

 private:
  template <class Fn>
  void for_each_image(Fn&& fn) {
    parallel_for(manifest_.images.size(), opt_.threads, [&](std::size_t i) { fn(manifest_.images[i]); });
  }

  EasyHardSplit read_split() const {
    const fs::path p = opt_.out / "split.json";
    if (!fs::exists(p)) fail_input("missing '" + p.string() + "'; run the split stage first");
    return split_from_json(read_json_file(p));
  }

  std::pair<std::size_t, std::size_t> count_labels(const char* dir) const {
    std::size_t labeled = 0, total = 0;
    for (const auto& e : manifest_.images) {
      const LabelMap l = load_label_map(detail::label_path(opt_.out / dir, e.id), manifest_.num_classes);
      labeled += l.labeled_count();
      total += l.pixels();
    }
    return {labeled, total};
  }

  Manifest manifest_;
  RunConfig config_;
  StageOptions opt_;
};

}  // namespace densipl
