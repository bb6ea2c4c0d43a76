#pragma once

#include <vector>

#include <Eigen/Core>

#include "sqat/charset.hpp"
#include "sqat/image.hpp"

namespace sqat {

// Greedy decode result. `seq` is the bos-initiated token sequence
// ([bos, t_1, ..., t_k, eos] unless the length cap cut generation short);
// `logits` has one row per emitted token, so row i produced seq[i+1] and
// argmax(row i) == seq[i+1] with ties broken toward the lowest index.
struct Decoded {
  std::vector<int> seq;
  Eigen::MatrixXd logits;

  // Emitted tokens t_1..t_{k+1} (everything after bos).
  std::vector<int> labels() const {
    return {seq.begin() + 1, seq.end()};
  }
};

// One addend of a logit-space objective: coeff * F[position][cls], with
// `position` indexing logit rows (0-based).
struct LogitPick {
  int position = 0;
  int cls = 0;
  double coeff = 1.0;
};

// The interface the attacks and the evaluation protocol consume: greedy
// generation, teacher-forced logits, and exact input-space gradients of
// logit/loss scalars. Implementations must be pure functions of
// (weights, image, forced tokens); concurrent readers are safe.
class SeqLogitModel {
 public:
  virtual ~SeqLogitModel() = default;

  virtual const Charset& charset() const = 0;
  virtual int max_len() const = 0;

  virtual Decoded decode(const Image& x) const = 0;

  // Logits at every position given the forced prefix. `forced` must start
  // with bos; a trailing eos is not fed back (it is terminal), so the
  // result has len(forced) rows, minus one if forced ends with eos.
  virtual Eigen::MatrixXd forced_logits(const Image& x,
                                        const std::vector<int>& forced) const = 0;

  // Gradient w.r.t. raw pixels of sum_i coeff_i * F[pos_i][cls_i] while
  // teacher-forcing `forced`. When non-null, `logits_out` receives the
  // logits seen by the differentiation path so callers can linearize
  // consistently.
  virtual Image logit_gradient(const Image& x, const std::vector<int>& forced,
                               const std::vector<LogitPick>& picks,
                               Eigen::MatrixXd* logits_out) const = 0;

  // Gradient w.r.t. raw pixels of the summed per-token cross-entropy of
  // `labels` (bos-framed, eos-terminated).
  virtual Image cross_entropy_gradient(const Image& x,
                                       const std::vector<int>& labels,
                                       double* loss_out) const = 0;
};

// Argmax with ties broken toward the lowest index.
inline int argmax_lowest(const Eigen::Ref<const Eigen::VectorXd>& v) {
  int best = 0;
  for (int j = 1; j < v.size(); ++j) {
    if (v[j] > v[best]) best = j;
  }
  return best;
}

}  // namespace sqat
