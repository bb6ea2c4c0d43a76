#pragma once

#include <Eigen/Core>

namespace sqat::qp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// min ||d + delta||_2^2  subject to  G delta <= h.
// Rows of G are linearized logit differences (g_orig - g_targ); h holds the
// corresponding logit gaps (out_targ - out_orig).
struct QpProblem {
  Vec d;
  Mat G;  // m x n, m may be 0
  Vec h;
};

enum class QpStatus { optimal, infeasible, max_iter };

struct QpSolution {
  Vec delta;
  Vec lambda;  // multipliers for G delta <= h, >= 0
  QpStatus status = QpStatus::max_iter;
  int iterations = 0;
  // KKT residuals in problem-scaled units; all <= 1e-6 when status==optimal.
  double primal_residual = 0.0;          // max constraint violation
  double dual_residual = 0.0;            // stationarity ||2(d+delta)+G^T lambda||
  double complementarity_residual = 0.0; // max |lambda_j (G delta - h)_j|
};

// Operator-splitting (ADMM) solve with over-relaxation. Constraint rows are
// normalized by their 2-norms internally; the solution and multipliers are
// reported in original units. Infeasible problems are detected via the
// standard dual certificate and reported through `status`, not an exception.
QpSolution solve(const QpProblem& problem, double tol = 1e-8,
                 int max_iters = 10000);

}  // namespace sqat::qp
