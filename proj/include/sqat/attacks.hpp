#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sqat/image.hpp"
#include "sqat/seq_model.hpp"

namespace sqat {

// Additive pixel perturbation produced by an attack. FGSM deltas are
// unit-scale directions (entries in {-1,0,1}); the evaluation harness
// applies epsilon through relative scaling, so no step size is baked in.
struct Perturbation {
  Image delta;
  double l2_norm = 0.0;
  std::string method;
  int iterations = 0;
  bool converged = false;
  int skipped_positions = 0;  // deepfool positions with no usable boundary
};

Perturbation make_perturbation(Image delta, std::string method, int iterations,
                               bool converged);

// Labels driving an attack: the target sequence for targeted modes, the
// original output labels for untargeted ones. Bos-framed like model output.
struct AttackTarget {
  std::vector<int> labels;
  int changed_position = -1;  // logit-row index for single-token targets
};

// sign of the summed cross-entropy gradient at the model's own output
// labels, with sign(0) = 0. A gradient that vanishes everywhere is flagged
// via converged=false and a zero delta.
Perturbation fgsm_untargeted(const SeqLogitModel& model, const Image& image);

// Negated sign of the gradient at the target labels.
Perturbation fgsm_targeted(const SeqLogitModel& model, const Image& image,
                           const AttackTarget& target);

// Iterative linearized-boundary attack over all sequence positions.
// `original_labels` defaults to the decode at entry; passing stored labels
// lets a caller resume against an earlier reference output.
Perturbation deepfool(const SeqLogitModel& model, const Image& image,
                      int top_amount = 1, int max_iters = 1,
                      const std::vector<int>* original_labels = nullptr);

struct BackwardErrorOptions {
  double alpha = 0.5;
  int iterations = 5;
  double margin = 0.0;  // optional slack pushing strictly past logit ties
};

// Per iteration: linearize target-vs-current logits for every mismatched
// token, solve the minimum-norm constrained step with the QP solver, apply
// an alpha-weighted update, re-decode. Pixel values are not clipped.
Perturbation backward_error(const SeqLogitModel& model, const Image& image,
                            const AttackTarget& target,
                            const BackwardErrorOptions& opts = {});

enum class CwMode { targeted, untargeted };

struct CwOptions {
  CwMode mode = CwMode::untargeted;
  double c = 0.05;
  double eta = 2e-5;
  double lr = 0.002;
  double weight_decay = 1e-5;
  int max_iters = 30;
  int patience = 5;
  std::uint64_t seed = 0;
};

// Tanh-reparameterized Adam attack minimizing ||dx||^2 + c*f(x+dx, L).
// Targeted runs exit as soon as the target is reached (converged=true);
// otherwise the lowest-loss perturbation seen is returned. For untargeted
// mode, target.labels holds the original output labels (captured from a
// fresh decode when empty).
Perturbation cw_attack(const SeqLogitModel& model, const Image& image,
                       const AttackTarget& target, const CwOptions& opts);

// Index of the rank-th largest logit, ties broken toward the lowest index.
int select_target(const Eigen::VectorXd& logit_row, int rank = 10);

// The tanh box reparameterization used by cw_attack: pixels = (tanh(w)+1)/2,
// always strictly inside (0,1).
Image cw_reconstruct(const Image& w);

// Elementwise sign with sign(0) = 0.
Image sign_direction(const Image& grad);

// Position-wise label comparison under sequence-length drift: positions are
// compared up to the shorter length and every trailing position of the
// longer sequence counts as changed.
bool position_changed(const std::vector<int>& reference,
                      const std::vector<int>& current, int position);
bool labels_equal(const std::vector<int>& reference,
                  const std::vector<int>& current);

}  // namespace sqat
