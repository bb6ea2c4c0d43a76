#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sqat/model.hpp"

namespace sqat {

// Flat key-value config with INI-style sections. Unknown keys are rejected
// so experiment files stay diff-clean.
struct ExperimentConfig {
  // [dataset]
  int n_train = 2000;
  int n_test = 200;
  std::uint64_t dataset_seed = 42;

  // [train]
  TrainConfig train;

  // [attack]
  std::string method = "fgsm";  // fgsm | deepfool | be | cw
  std::string mode = "untargeted";
  int n_images = 100;
  std::uint64_t attack_seed = 1234;
  int target_rank = 10;
  int jobs = 2;
  double cw_c = -1.0;        // negative -> mode default (0.05 / 15)
  double cw_eta = -1.0;      // negative -> mode default (2e-5 / 0.002)
  int cw_max_iters = -1;     // negative -> mode default (30 / 50)
  double cw_lr = 0.002;
  double cw_weight_decay = 1e-5;
  int cw_patience = 5;
  double be_alpha = 0.5;
  int be_iterations = 5;
  double be_margin = 0.0;
  int deepfool_top_amount = 1;
  int deepfool_max_iters = 1;

  // [output]
  std::string out_dir = "runs/out";

  static ExperimentConfig load(const std::string& path);
  static ExperimentConfig from_text(const std::string& text);
  void apply_override(const std::string& dotted_key, const std::string& value);
  std::string to_text() const;  // canonical serialization
  std::uint64_t hash() const;   // FNV-1a of canonical text

  // Effective C&W constants after mode-default resolution.
  double effective_cw_c() const;
  double effective_cw_eta() const;
  int effective_cw_max_iters() const;

  // out_dir with SQAT_OUTPUT_ROOT applied to relative paths.
  std::string resolved_out_dir() const;
};

struct TrainOutputs {
  std::string run_dir;
  std::string model_path;
  std::string report_path;
  TrainReport report;
};

// Generates the dataset, trains the model, writes model file, dataset
// manifest, metrics report, and the resolved config into the run directory.
TrainOutputs run_train(const ExperimentConfig& cfg);

struct AttackOutputs {
  std::string dir;  // <run>/attack/<method>_<mode>
  std::string manifest_path;
  std::string runrecord_path;
  int n_images = 0;
};

// Attacks the first n_images test images with the configured method and
// stores one raw f64 delta blob per image plus manifest and run records.
AttackOutputs run_attack(const ExperimentConfig& cfg,
                         const std::string& model_path);

// Sweeps every attack directory found in the run: mean-CER curves on the
// untargeted grid, success-ratio curves on the targeted grid. Returns the
// curve CSV paths written.
std::vector<std::string> run_sweep(const std::string& run_dir);

// Merges curve CSVs into a long-format (method, epsilon, value) table and a
// plain-text summary of endpoint success ratios and peak mean CER.
void run_report(const std::vector<std::string>& sweep_csvs,
                const std::string& out_csv, const std::string& summary_path);

// Invariant checks used by tests: every manifest entry exists with the
// declared byte length, and every converged targeted perturbation
// re-decodes to its stored target. Throws on violation; returns the number
// of perturbations checked.
int verify_attack_dir(const std::string& run_dir, const std::string& attack_dir);

// Raw little-endian f64 blob, row-major.
void write_delta_blob(const std::string& path, const Image& delta);
Image read_delta_blob(const std::string& path, int rows, int cols);

}  // namespace sqat
