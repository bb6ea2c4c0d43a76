#include "sqat/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "sqat/model.hpp"
#include "sqat/qpsolve.hpp"
#include "sqat/rng.hpp"

namespace sqat {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

Vec flatten(const Image& m) {
  Vec v(m.size());
  Eigen::Index at = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) v[at++] = m(r, c);
  }
  return v;
}

Image unflatten(const Vec& v, Eigen::Index rows, Eigen::Index cols) {
  Image m(rows, cols);
  Eigen::Index at = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = v[at++];
  }
  return m;
}

// One forward, many backwards when the model supports it.
std::vector<Image> batched_logit_gradients(
    const SeqLogitModel& model, const Image& x, const std::vector<int>& forced,
    const std::vector<std::vector<LogitPick>>& pick_sets, Mat* logits_out) {
  if (const auto* m = dynamic_cast<const Model*>(&model)) {
    return m->logit_gradients(x, forced, pick_sets, logits_out);
  }
  std::vector<Image> out;
  out.reserve(pick_sets.size());
  for (size_t i = 0; i < pick_sets.size(); ++i) {
    out.push_back(model.logit_gradient(x, forced, pick_sets[i],
                                       i == 0 ? logits_out : nullptr));
  }
  return out;
}

std::vector<int> strip_bos(const std::vector<int>& seq) {
  if (seq.empty()) return {};
  return {seq.begin() + 1, seq.end()};
}

}  // namespace

Perturbation make_perturbation(Image delta, std::string method, int iterations,
                               bool converged) {
  Perturbation p;
  p.l2_norm = delta.norm();
  p.delta = std::move(delta);
  p.method = std::move(method);
  p.iterations = iterations;
  p.converged = converged;
  return p;
}

bool position_changed(const std::vector<int>& reference,
                      const std::vector<int>& current, int position) {
  const size_t t = static_cast<size_t>(position);
  if (t >= reference.size() || t >= current.size()) return true;
  return reference[t] != current[t];
}

bool labels_equal(const std::vector<int>& reference,
                  const std::vector<int>& current) {
  if (reference.size() != current.size()) return false;
  return std::equal(reference.begin(), reference.end(), current.begin());
}

Image sign_direction(const Image& grad) {
  return grad.unaryExpr([](double g) {
    if (g > 0.0) return 1.0;
    if (g < 0.0) return -1.0;
    return 0.0;
  });
}

// ---------------------------------------------------------------------------
// FGSM

Perturbation fgsm_untargeted(const SeqLogitModel& model, const Image& image) {
  const Decoded out = model.decode(image);
  const Image grad = model.cross_entropy_gradient(image, out.seq, nullptr);
  Perturbation p = make_perturbation(sign_direction(grad), "fgsm_untargeted",
                                     1, true);
  if (p.l2_norm == 0.0) p.converged = false;  // degenerate zero gradient
  return p;
}

Perturbation fgsm_targeted(const SeqLogitModel& model, const Image& image,
                           const AttackTarget& target) {
  const Image grad =
      model.cross_entropy_gradient(image, target.labels, nullptr);
  Perturbation p = make_perturbation(Image(-sign_direction(grad)),
                                     "fgsm_targeted", 1, true);
  if (p.l2_norm == 0.0) p.converged = false;
  return p;
}

// ---------------------------------------------------------------------------
// DeepFool

Perturbation deepfool(const SeqLogitModel& model, const Image& image,
                      int top_amount, int max_iters,
                      const std::vector<int>* original_labels) {
  if (top_amount < 1 || max_iters < 0) {
    throw std::invalid_argument("deepfool: bad parameters");
  }
  Decoded dec = model.decode(image);
  std::vector<int> labels = dec.labels();
  const std::vector<int> org = original_labels ? *original_labels : labels;
  const int len = static_cast<int>(org.size());

  Image x = image;
  Image delta = Image::Zero(image.rows(), image.cols());
  int iters = 0;
  int skipped = 0;

  const auto any_unchanged = [&]() {
    for (int t = 0; t < len; ++t) {
      if (!position_changed(org, labels, t)) return true;
    }
    return false;
  };

  while (any_unchanged() && iters < max_iters) {
    // linearize at the current iterate, teacher-forcing its own decode
    std::vector<int> positions;
    std::vector<std::vector<LogitPick>> pick_sets;
    std::vector<std::vector<int>> candidate_sets;
    for (int t = 0; t < len && t < static_cast<int>(labels.size()); ++t) {
      if (position_changed(org, labels, t)) continue;
      const int khat = org[t];
      Eigen::VectorXd row = dec.logits.row(t);
      std::vector<int> idx(static_cast<size_t>(row.size()));
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (row[a] != row[b]) return row[a] > row[b];
        return a < b;
      });
      std::vector<int> cands;
      for (int j = 0; j < static_cast<int>(idx.size()) &&
                      static_cast<int>(cands.size()) < top_amount + 1;
           ++j) {
        if (static_cast<int>(cands.size()) == top_amount + 1) break;
        cands.push_back(idx[static_cast<size_t>(j)]);
      }
      std::vector<int> ks;
      for (int k : cands) {
        if (k != khat) ks.push_back(k);
      }
      if (static_cast<int>(ks.size()) > top_amount) ks.resize(top_amount);
      for (int k : ks) {
        pick_sets.push_back({{t, k, 1.0}, {t, khat, -1.0}});
      }
      positions.push_back(t);
      candidate_sets.push_back(std::move(ks));
    }
    if (positions.empty()) break;

    Mat lin_logits;
    const std::vector<Image> grads =
        batched_logit_gradients(model, x, dec.seq, pick_sets, &lin_logits);

    Image update = Image::Zero(image.rows(), image.cols());
    size_t g_at = 0;
    bool stepped = false;
    for (size_t pi = 0; pi < positions.size(); ++pi) {
      const int t = positions[pi];
      const int khat = org[static_cast<size_t>(t)];
      double best_ratio = std::numeric_limits<double>::infinity();
      const Image* best_w = nullptr;
      double best_f = 0.0;
      for (int k : candidate_sets[pi]) {
        const Image& w = grads[g_at];
        const double f = lin_logits(t, k) - lin_logits(t, khat);
        const double wn = w.norm();
        ++g_at;
        if (wn == 0.0) continue;
        const double ratio = std::abs(f) / wn;
        if (ratio < best_ratio) {
          best_ratio = ratio;
          best_w = &w;
          best_f = f;
        }
      }
      if (!best_w) {
        ++skipped;  // no usable boundary at this position this iteration
        continue;
      }
      const double wn2 = best_w->squaredNorm();
      update += (std::abs(best_f) / wn2) * (*best_w);
      stepped = true;
    }
    ++iters;
    if (!stepped) break;

    x += update;
    delta += update;
    dec = model.decode(x);
    labels = dec.labels();
  }

  Perturbation p =
      make_perturbation(std::move(delta), "deepfool", iters, !any_unchanged());
  p.skipped_positions = skipped;
  return p;
}

// ---------------------------------------------------------------------------
// Backward Error

Perturbation backward_error(const SeqLogitModel& model, const Image& image,
                            const AttackTarget& target,
                            const BackwardErrorOptions& opts) {
  if (target.labels.empty()) {
    throw std::invalid_argument("backward_error: target labels required");
  }
  const std::vector<int> tgt = strip_bos(target.labels);

  Decoded dec = model.decode(image);
  std::vector<int> labels = dec.labels();

  Image x = image;
  Image delta = Image::Zero(image.rows(), image.cols());
  int iters = 0;
  bool qp_failed = false;

  for (int i = 0; i < opts.iterations; ++i) {
    // diff set of still-mismatched tokens
    std::vector<int> diff;
    const int span = static_cast<int>(std::max(tgt.size(), labels.size()));
    for (int t = 0; t < span; ++t) {
      if (position_changed(tgt, labels, t)) diff.push_back(t);
    }
    if (diff.empty()) break;  // target reached, nothing to solve

    // constraints exist only where both sequences carry the position
    std::vector<int> rows;
    std::vector<std::vector<LogitPick>> pick_sets;
    for (int t : diff) {
      if (t < static_cast<int>(labels.size()) &&
          t < static_cast<int>(tgt.size())) {
        const int orig = labels[static_cast<size_t>(t)];
        const int targ = tgt[static_cast<size_t>(t)];
        pick_sets.push_back({{t, orig, 1.0}, {t, targ, -1.0}});
        rows.push_back(t);
      }
    }

    Mat lin_logits;
    const std::vector<Image> grads =
        batched_logit_gradients(model, x, dec.seq, pick_sets, &lin_logits);

    qp::QpProblem problem;
    problem.d = flatten(delta);
    problem.G.resize(static_cast<Eigen::Index>(rows.size()), image.size());
    problem.h.resize(static_cast<Eigen::Index>(rows.size()));
    for (size_t j = 0; j < rows.size(); ++j) {
      const int t = rows[j];
      const int orig = labels[static_cast<size_t>(t)];
      const int targ = tgt[static_cast<size_t>(t)];
      problem.G.row(static_cast<Eigen::Index>(j)) = flatten(grads[j]);
      problem.h[static_cast<Eigen::Index>(j)] =
          lin_logits(t, targ) - lin_logits(t, orig) - opts.margin;
    }

    const qp::QpSolution sol = qp::solve(problem);
    if (sol.status != qp::QpStatus::optimal) {
      qp_failed = true;
      break;
    }
    const Image step = unflatten(sol.delta, image.rows(), image.cols());
    delta += opts.alpha * step;
    x += opts.alpha * step;
    ++iters;
    dec = model.decode(x);
    labels = dec.labels();
  }

  const bool reached = labels_equal(tgt, labels);
  Perturbation p = make_perturbation(std::move(delta), "backward_error", iters,
                                     reached && !qp_failed);
  return p;
}

// ---------------------------------------------------------------------------
// Carlini & Wagner

namespace {

// Elementwise atanh(2p - 1); callers guarantee p strictly inside (0,1).
Image to_w_space(const Image& p) {
  return p.unaryExpr([](double v) { return std::atanh(2.0 * v - 1.0); });
}

}  // namespace

Image cw_reconstruct(const Image& w) {
  return w.unaryExpr([](double v) { return 0.5 * (std::tanh(v) + 1.0); });
}

Perturbation cw_attack(const SeqLogitModel& model, const Image& image,
                       const AttackTarget& target, const CwOptions& opts) {
  std::vector<int> labels_seq = target.labels;
  if (labels_seq.empty()) {
    if (opts.mode == CwMode::targeted) {
      throw std::invalid_argument("cw_attack: targeted mode needs labels");
    }
    labels_seq = model.decode(image).seq;
  }
  const std::vector<int> L = strip_bos(labels_seq);
  const int n_pos = static_cast<int>(L.size());

  // eta-perturbed initialization mapped strictly inside (0,1)
  Rng rng = Rng(opts.seed).child(0xC3);
  Image p0 = image;
  for (Eigen::Index r = 0; r < p0.rows(); ++r) {
    for (Eigen::Index c = 0; c < p0.cols(); ++c) {
      double v = std::clamp(p0(r, c) + opts.eta * rng.rademacher(), 0.0, 1.0);
      if (v == 0.0) v = opts.eta;
      if (v == 1.0) v = 1.0 - opts.eta;
      p0(r, c) = v;
    }
  }
  Image w = to_w_space(p0);

  Image adam_m = Image::Zero(image.rows(), image.cols());
  Image adam_v = Image::Zero(image.rows(), image.cols());
  const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  double best_loss = std::numeric_limits<double>::infinity();
  Image best_delta = Image::Zero(image.rows(), image.cols());
  int stall = 0;
  int iters = 0;
  bool converged = false;
  bool aborted = false;

  for (int it = 0; it < opts.max_iters; ++it) {
    const Image pixels = cw_reconstruct(w);
    const Image delta = pixels - image;
    const double dist = delta.squaredNorm();

    // surrogate terms on the teacher-forced logits of L
    Mat logits = model.forced_logits(pixels, labels_seq);
    double f = 0.0;
    std::vector<LogitPick> picks;
    for (int t = 0; t < n_pos && t < logits.rows(); ++t) {
      const int lt = L[static_cast<size_t>(t)];
      double other = -std::numeric_limits<double>::infinity();
      int other_k = -1;
      for (int k = 0; k < logits.cols(); ++k) {
        if (k == lt) continue;
        if (logits(t, k) > other) {
          other = logits(t, k);
          other_k = k;
        }
      }
      const double term = opts.mode == CwMode::targeted
                              ? other - logits(t, lt)
                              : logits(t, lt) - other;
      if (term > 0.0) {
        f += term;
        if (opts.mode == CwMode::targeted) {
          picks.push_back({t, other_k, 1.0});
          picks.push_back({t, lt, -1.0});
        } else {
          picks.push_back({t, lt, 1.0});
          picks.push_back({t, other_k, -1.0});
        }
      }
    }
    const double loss = dist + opts.c * f;

    if (!std::isfinite(loss)) {
      aborted = true;
      break;
    }
    if (loss < best_loss) {
      best_loss = loss;
      best_delta = delta;
      stall = 0;
    } else {
      ++stall;
    }
    if (opts.mode == CwMode::targeted && f == 0.0) {
      // target reached: exit immediately with the current perturbation
      best_delta = delta;
      converged = true;
      break;
    }
    if (stall >= opts.patience) break;

    Image dldp = 2.0 * delta;
    if (!picks.empty()) {
      dldp += opts.c * model.logit_gradient(pixels, labels_seq, picks, nullptr);
    }
    const Image dpdw =
        w.unaryExpr([](double v) { const double t = std::tanh(v); return 0.5 * (1.0 - t * t); });
    Image g = dldp.cwiseProduct(dpdw) + opts.weight_decay * w;

    ++iters;
    adam_m = beta1 * adam_m + (1.0 - beta1) * g;
    adam_v = beta2 * adam_v + (1.0 - beta2) * g.cwiseProduct(g);
    const double bc1 = 1.0 - std::pow(beta1, iters);
    const double bc2 = 1.0 - std::pow(beta2, iters);
    w -= opts.lr * (adam_m.array() / bc1 /
                    ((adam_v.array() / bc2).sqrt() + adam_eps))
                       .matrix();
  }

  if (opts.mode == CwMode::targeted && converged) {
    // re-verify: converged targeted results must decode to the target
    const Decoded check = model.decode(image + best_delta);
    converged = labels_equal(L, check.labels());
  }
  Perturbation p = make_perturbation(
      std::move(best_delta), opts.mode == CwMode::targeted ? "cw_targeted" : "cw_untargeted",
      iters,
      opts.mode == CwMode::targeted ? converged : !aborted);
  return p;
}

int select_target(const Eigen::VectorXd& logit_row, int rank) {
  const int v = static_cast<int>(logit_row.size());
  if (rank < 1 || rank > v) {
    throw std::invalid_argument("select_target: rank out of range");
  }
  std::vector<int> idx(static_cast<size_t>(v));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (logit_row[a] != logit_row[b]) return logit_row[a] > logit_row[b];
    return a < b;
  });
  return idx[static_cast<size_t>(rank - 1)];
}

}  // namespace sqat
