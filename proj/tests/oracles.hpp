// Independent reference implementations used as test oracles. These must
// stay decoupled from the library code paths they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sqat/qpsolve.hpp"
#include "sqat/seq_model.hpp"

namespace sqat::testing {

// Exhaustive recursive edit distance (no DP), usable for strings up to ~10.
inline int edit_distance_recursive(const std::string& a, const std::string& b,
                                   size_t i = 0, size_t j = 0) {
  if (i == a.size()) return static_cast<int>(b.size() - j);
  if (j == b.size()) return static_cast<int>(a.size() - i);
  const int match = edit_distance_recursive(a, b, i + 1, j + 1) +
                    (a[i] == b[j] ? 0 : 1);
  const int del = edit_distance_recursive(a, b, i + 1, j) + 1;
  const int ins = edit_distance_recursive(a, b, i, j + 1) + 1;
  return std::min({match, del, ins});
}

// Projected gradient on the dual of  min ||d+delta||^2 s.t. G delta <= h:
//   min_{lambda >= 0} (1/4) lambda^T G G^T lambda + lambda^T (G d + h),
// recovering delta = -d - G^T lambda / 2. Run to a tight fixed-point
// tolerance; independent of the ADMM path it checks.
inline Eigen::VectorXd qp_dual_pgd(const qp::QpProblem& pb, double tol = 1e-10,
                                   long max_iters = 5000000) {
  const Eigen::MatrixXd M = pb.G * pb.G.transpose();
  const Eigen::VectorXd q = pb.G * pb.d + pb.h;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  const double lips = std::max(1e-12, es.eigenvalues().maxCoeff() / 2.0);
  const double step = 1.0 / lips;
  Eigen::VectorXd lambda = Eigen::VectorXd::Zero(pb.G.rows());
  for (long k = 0; k < max_iters; ++k) {
    const Eigen::VectorXd grad = 0.5 * (M * lambda) + q;
    Eigen::VectorXd next = (lambda - step * grad).cwiseMax(0.0);
    const double move = (next - lambda).lpNorm<Eigen::Infinity>();
    lambda = std::move(next);
    if (move <= tol) break;
  }
  return -pb.d - 0.5 * pb.G.transpose() * lambda;
}

// Fixed-size affine multiclass "recognizer": position t emits logits
// A[t] * vec(x) + b[t]. Gradients are exact rows of A, which makes every
// linearization-based attack analytically checkable.
class AffineModel : public SeqLogitModel {
 public:
  AffineModel(std::vector<Eigen::MatrixXd> a, std::vector<Eigen::VectorXd> b,
              int img_rows, int img_cols)
      : a_(std::move(a)), b_(std::move(b)), rows_(img_rows), cols_(img_cols) {}

  const Charset& charset() const override { return cs_; }
  int max_len() const override { return static_cast<int>(a_.size()) + 2; }

  Eigen::MatrixXd logits_at(const Image& x) const {
    Eigen::VectorXd v(x.size());
    Eigen::Index at = 0;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (Eigen::Index c = 0; c < x.cols(); ++c) v[at++] = x(r, c);
    }
    Eigen::MatrixXd l(static_cast<Eigen::Index>(a_.size()), b_[0].size());
    for (size_t t = 0; t < a_.size(); ++t) {
      l.row(static_cast<Eigen::Index>(t)) = (a_[t] * v + b_[t]).transpose();
    }
    return l;
  }

  Decoded decode(const Image& x) const override {
    Decoded d;
    d.logits = logits_at(x);
    d.seq.push_back(cs_.bos());
    for (Eigen::Index t = 0; t < d.logits.rows(); ++t) {
      d.seq.push_back(argmax_lowest(d.logits.row(t).transpose()));
    }
    return d;
  }

  Eigen::MatrixXd forced_logits(const Image& x,
                                const std::vector<int>&) const override {
    return logits_at(x);
  }

  Image logit_gradient(const Image& x, const std::vector<int>&,
                       const std::vector<LogitPick>& picks,
                       Eigen::MatrixXd* logits_out) const override {
    if (logits_out) *logits_out = logits_at(x);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(rows_ * cols_);
    for (const auto& p : picks) {
      g += p.coeff * a_[static_cast<size_t>(p.position)].row(p.cls).transpose();
    }
    Image img(rows_, cols_);
    Eigen::Index at = 0;
    for (int r = 0; r < rows_; ++r) {
      for (int c = 0; c < cols_; ++c) img(r, c) = g[at++];
    }
    return img;
  }

  Image cross_entropy_gradient(const Image& x, const std::vector<int>& labels,
                               double* loss_out) const override {
    const Eigen::MatrixXd l = logits_at(x);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(rows_ * cols_);
    double loss = 0.0;
    const Eigen::Index n_pos =
        std::min<Eigen::Index>(l.rows(), static_cast<Eigen::Index>(labels.size()) - 1);
    for (Eigen::Index t = 0; t < n_pos; ++t) {
      const int target = labels[static_cast<size_t>(t) + 1];
      const double mx = l.row(t).maxCoeff();
      Eigen::ArrayXd e = (l.row(t).transpose().array() - mx).exp();
      const Eigen::VectorXd p = (e / e.sum()).matrix();
      loss += std::log(e.sum()) + mx - l(t, target);
      for (Eigen::Index k = 0; k < p.size(); ++k) {
        double coeff = p[k] - (k == target ? 1.0 : 0.0);
        g += coeff * a_[static_cast<size_t>(t)].row(static_cast<int>(k)).transpose();
      }
    }
    if (loss_out) *loss_out = loss;
    Image img(rows_, cols_);
    Eigen::Index at = 0;
    for (int r = 0; r < rows_; ++r) {
      for (int c = 0; c < cols_; ++c) img(r, c) = g[at++];
    }
    return img;
  }

 private:
  std::vector<Eigen::MatrixXd> a_;  // per position: v x (rows*cols)
  std::vector<Eigen::VectorXd> b_;  // per position: v
  int rows_, cols_;
  Charset cs_;
};

}  // namespace sqat::testing
