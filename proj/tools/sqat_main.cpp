// Command-line driver: train a recognizer, run attack batches, sweep the
// stored perturbations over the evaluation grids, and merge the curves.
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sqat/harness.hpp"

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

sqat::ExperimentConfig load_config(const std::string& path,
                                   const std::vector<std::string>& overrides) {
  sqat::ExperimentConfig cfg = sqat::ExperimentConfig::load(path);
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("--set expects section.key=value, got: " + kv);
    }
    cfg.apply_override(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sqat: adversarial-attack toolkit for a toy OCR recognizer"};
  app.require_subcommand(1);

  std::string config_path, model_path, run_dir, out_csv, summary_path;
  std::vector<std::string> overrides, sweep_files;

  CLI::App* cmd_train = app.add_subcommand("train", "train the recognizer");
  cmd_train->add_option("--config", config_path, "config file")->required();
  cmd_train->add_option("--set", overrides, "override config key (section.key=value)");

  CLI::App* cmd_attack = app.add_subcommand("attack", "attack test images");
  cmd_attack->add_option("--config", config_path, "config file")->required();
  cmd_attack->add_option("--model", model_path, "trained model file")->required();
  cmd_attack->add_option("--set", overrides, "override config key (section.key=value)");

  CLI::App* cmd_sweep = app.add_subcommand("sweep", "evaluate stored perturbations");
  cmd_sweep->add_option("--run", run_dir, "run directory")->required();

  CLI::App* cmd_report = app.add_subcommand("report", "merge sweep curves");
  cmd_report->add_option("--out", out_csv, "combined csv path")->required();
  cmd_report->add_option("--summary", summary_path, "summary text path")->required();
  cmd_report->add_option("files", sweep_files, "sweep csv files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    if (cmd_train->parsed()) {
      const auto out = sqat::run_train(load_config(config_path, overrides));
      std::cout << "model: " << out.model_path << "\n"
                << "report: " << out.report_path << "\n"
                << "train_cer: " << out.report.train_cer << "\n"
                << "test_cer: " << out.report.test_cer << "\n";
    } else if (cmd_attack->parsed()) {
      const auto out =
          sqat::run_attack(load_config(config_path, overrides), model_path);
      std::cout << "attack dir: " << out.dir << "\n"
                << "images: " << out.n_images << "\n";
    } else if (cmd_sweep->parsed()) {
      for (const std::string& path : sqat::run_sweep(run_dir)) {
        std::cout << path << "\n";
      }
    } else if (cmd_report->parsed()) {
      sqat::run_report(sweep_files, out_csv, summary_path);
      std::cout << out_csv << "\n" << summary_path << "\n";
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
