// densipl: run pipeline stages over a manifest of DPLT probability maps.
//
//   densipl <stage> --manifest m.json [--config c.json] --out dir [--round N]
//                   [--threads N] [--dump-iterations]
//
// Exit codes: 0 ok, 2 input error, 3 invariant violation, 4 divergence.
// Failures print one JSON object to stderr.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "densipl/pipeline.hpp"

namespace {

int exit_code(densipl::ErrorKind kind) {
  switch (kind) {
    case densipl::ErrorKind::input: return 2;
    case densipl::ErrorKind::invariant: return 3;
    case densipl::ErrorKind::divergence: return 4;
  }
  return 2;
}

int report_error(const std::string& kind, const std::string& message, const std::string& image_id, int code) {
  nlohmann::json j = {{"error", kind}, {"message", message}, {"exit_code", code}};
  if (!image_id.empty()) j["image_id"] = image_id;
  std::cerr << j.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-phase pseudo-label densification pipeline"};
  std::string stage_name;
  std::string manifest_path;
  std::string config_path;
  std::string out_dir;
  densipl::StageOptions opt;

  std::string stages;
  for (const auto& [name, _] : densipl::stage_names()) stages += (stages.empty() ? "" : " | ") + name;
  app.add_option("stage", stage_name, stages)->required();
  app.add_option("--manifest", manifest_path, "Manifest JSON (not needed for demo)");
  app.add_option("--config", config_path, "Pipeline config JSON (defaults when omitted)");
  app.add_option("--out", out_dir, "Output directory")->required();
  app.add_option("--round", opt.round, "Global round index (0-based)");
  app.add_option("--threads", opt.threads, "Maximum worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--dump-iterations", opt.dump_iterations, "Write labels/iter<N>/ after every voting iteration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("input", e.what(), "", 2);
  }

  try {
    const densipl::Stage stage = densipl::parse_stage(stage_name);
    opt.out = out_dir;
    const std::optional<densipl::fs::path> config =
        config_path.empty() ? std::nullopt : std::optional<densipl::fs::path>(config_path);
    densipl::RunConfig run_config = densipl::load_run_config(config);
    densipl::Manifest manifest;
    if (stage != densipl::Stage::demo) {
      if (manifest_path.empty()) densipl::fail_input("--manifest is required for stage '" + stage_name + "'");
      manifest = densipl::load_manifest(manifest_path);
    }
    densipl::PipelineRunner runner(std::move(manifest), std::move(run_config), opt);
    runner.run(stage);
  } catch (const densipl::Error& e) {
    return report_error(densipl::to_string(e.kind()), e.what(), e.image_id(), exit_code(e.kind()));
  } catch (const std::filesystem::filesystem_error& e) {
    return report_error("input", e.what(), "", 2);
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), "", 1);
  }
  return 0;
}
