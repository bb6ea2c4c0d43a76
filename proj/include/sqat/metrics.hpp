#pragma once

#include <string>
#include <vector>

#include "sqat/attacks.hpp"
#include "sqat/image.hpp"
#include "sqat/seq_model.hpp"

namespace sqat {

// Minimal edit script tallies. CER = (S + D + I) / reference length and may
// exceed 1 through insertions.
struct EditCosts {
  int substitutions = 0;
  int deletions = 0;
  int insertions = 0;
  int reference_length = 0;

  int distance() const { return substitutions + deletions + insertions; }
  double cer() const {
    return static_cast<double>(distance()) / reference_length;
  }
};

int levenshtein(const std::string& a, const std::string& b);
EditCosts edit_costs(const std::string& reference, const std::string& hypothesis);

// Levenshtein distance over reference length; throws std::invalid_argument
// on an empty reference.
double cer(const std::string& reference, const std::string& hypothesis);

// x + epsilon * (||x||/||delta||) * delta, without clipping. epsilon = 0
// returns x unchanged; otherwise a zero-norm delta is an error.
Image scaled_image(const Image& x, const Image& delta, double epsilon);

struct ScaledEval {
  std::string text;
  std::vector<int> tokens;
};

ScaledEval scaled_eval(const SeqLogitModel& model, const Image& x,
                       const Perturbation& delta, double epsilon);

struct SweepRecord {
  int image_id = 0;
  double epsilon = 0.0;
  double cer_vs_original = 0.0;
  double cer_vs_target = -1.0;  // negative when not applicable
};

struct SweepCurve {
  std::vector<double> grid;    // strictly increasing
  std::vector<double> values;  // per-grid-point aggregate
  std::string metric_kind;     // "mean_cer" or "success_ratio"
  int n_images = 0;
  std::vector<SweepRecord> records;
};

// The paper-protocol grids: n/1e4 for n = 0..99 (untargeted) and n/1e5 for
// n in {0..99} u {100,110,...,390} (targeted; 130 points).
std::vector<double> untargeted_grid();
std::vector<double> targeted_grid();

// Mean CER between the scaled-perturbation transcription and the ORIGINAL
// DECODED text (not dataset ground truth), per grid point.
SweepCurve sweep_untargeted(const SeqLogitModel& model,
                            const std::vector<Image>& images,
                            const std::vector<Perturbation>& deltas,
                            const std::vector<double>& grid,
                            const std::vector<int>& ids = {});

// Cumulative fraction of images whose transcription matched the target
// (CER 0) at some evaluated scale <= the grid point. With
// `native_scale_only` each image is evaluated once at the scale the attack
// emitted (relative size ||delta||/||x||), the convention used for C&W.
SweepCurve success_ratio_curve(const SeqLogitModel& model,
                               const std::vector<Image>& images,
                               const std::vector<Perturbation>& deltas,
                               const std::vector<std::string>& targets,
                               const std::vector<double>& grid,
                               bool native_scale_only = false,
                               const std::vector<int>& ids = {});

// Curve CSV: epsilon,value,n_images,metric_kind.
void write_curve_csv(const std::string& path, const SweepCurve& curve);
SweepCurve read_curve_csv(const std::string& path);

}  // namespace sqat
