#include "sqat/qpsolve.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <stdexcept>

namespace sqat::qp {

namespace {

constexpr double kSigma = 1e-6;      // proximal regularization
constexpr double kAlpha = 1.6;       // over-relaxation
constexpr double kKktTol = 1e-6;
constexpr double kInfTol = 1e-8;     // certificate tolerance
constexpr int kCheckInterval = 25;

double inf_norm(const Vec& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

// KKT residuals in original units, scaled by max(1, natural magnitude).
void fill_kkt(const QpProblem& pb, QpSolution& sol) {
  const Vec slack = pb.G.rows() ? Vec(pb.G * sol.delta - pb.h) : Vec();
  double viol = 0.0, comp = 0.0;
  for (Eigen::Index j = 0; j < slack.size(); ++j) {
    viol = std::max(viol, slack[j]);
    comp = std::max(comp, std::abs(sol.lambda[j] * slack[j]));
  }
  const Vec stat = 2.0 * (pb.d + sol.delta) +
                   (pb.G.rows() ? Vec(pb.G.transpose() * sol.lambda)
                                : Vec(Vec::Zero(pb.d.size())));
  sol.primal_residual = std::max(0.0, viol) / std::max(1.0, inf_norm(pb.h));
  sol.dual_residual = inf_norm(stat) / std::max(1.0, 2.0 * inf_norm(pb.d));
  sol.complementarity_residual = comp / std::max(1.0, inf_norm(sol.lambda));
}

bool kkt_ok(const QpSolution& sol) {
  return sol.primal_residual <= kKktTol && sol.dual_residual <= kKktTol &&
         sol.complementarity_residual <= kKktTol;
}

}  // namespace

QpSolution solve(const QpProblem& pb, double tol, int max_iters) {
  const Eigen::Index n = pb.d.size();
  const Eigen::Index m = pb.G.rows();
  if (m != pb.h.size() || (m > 0 && pb.G.cols() != n)) {
    throw std::invalid_argument("qp: inconsistent dimensions");
  }
  if (!pb.d.allFinite() || (m > 0 && (!pb.G.allFinite() || !pb.h.allFinite()))) {
    throw std::invalid_argument("qp: non-finite problem data");
  }

  QpSolution sol;
  sol.delta = -pb.d;  // unconstrained minimizer, also the warm start
  sol.lambda = Vec::Zero(m);

  // Row normalization; zero rows reduce to 0 <= h_j.
  std::vector<Eigen::Index> active;
  for (Eigen::Index j = 0; j < m; ++j) {
    const double nrm = pb.G.row(j).norm();
    if (nrm == 0.0) {
      if (pb.h[j] < 0.0) {
        sol.status = QpStatus::infeasible;
        fill_kkt(pb, sol);
        return sol;
      }
    } else {
      active.push_back(j);
    }
  }
  const Eigen::Index ma = static_cast<Eigen::Index>(active.size());
  if (ma == 0) {
    sol.status = QpStatus::optimal;
    fill_kkt(pb, sol);
    return sol;
  }

  Mat G(ma, n);
  Vec h(ma), row_norm(ma);
  for (Eigen::Index i = 0; i < ma; ++i) {
    const double nrm = pb.G.row(active[static_cast<size_t>(i)]).norm();
    row_norm[i] = nrm;
    G.row(i) = pb.G.row(active[static_cast<size_t>(i)]) / nrm;
    h[i] = pb.h[active[static_cast<size_t>(i)]] / nrm;
  }

  const Vec q = 2.0 * pb.d;
  const double c = 2.0 + kSigma;
  const Mat GGt = G * G.transpose();
  double rho = 1.0;
  Eigen::LLT<Mat> llt((GGt + (c / rho) * Mat::Identity(ma, ma)).eval());

  // (cI + rho G^T G)^{-1} v via the matrix-inversion lemma; only the small
  // ma x ma system is ever factorized.
  auto kkt_solve = [&](const Vec& v) -> Vec {
    return (v - G.transpose() * llt.solve(G * v)) / c;
  };

  Vec x = sol.delta;
  Vec z = (G * x).cwiseMin(h);
  Vec y = Vec::Zero(ma);
  Vec y_prev = y;
  bool converged = false;
  bool infeasible = false;
  int iter = 0;

  while (iter < max_iters) {
    ++iter;
    const Vec rhs = kSigma * x - q + G.transpose() * (rho * z - y);
    const Vec xt = kkt_solve(rhs);
    const Vec zt = G * xt;
    x = kAlpha * xt + (1.0 - kAlpha) * x;
    const Vec z_relaxed = kAlpha * zt + (1.0 - kAlpha) * z;
    const Vec z_next = (z_relaxed + y / rho).cwiseMin(h);
    y += rho * (z_relaxed - z_next);
    z = z_next;

    if (iter % kCheckInterval != 0 && iter != max_iters) continue;

    const Vec Gx = G * x;
    const Vec Gty = G.transpose() * y;
    const double rp = inf_norm(Gx - z);
    const double rd = inf_norm(2.0 * x + q + Gty);
    const double eps_p = tol * (1.0 + std::max(inf_norm(Gx), inf_norm(z)));
    const double eps_d =
        tol * (1.0 + std::max({2.0 * inf_norm(x), inf_norm(q), inf_norm(Gty)}));
    if (rp <= eps_p && rd <= eps_d) {
      converged = true;
      break;
    }

    // Primal infeasibility certificate: a nonnegative dual direction dy
    // with G^T dy ~ 0 and h^T dy < 0.
    Vec dy = y - y_prev;
    const double dy_norm = inf_norm(dy);
    if (dy_norm > 0.0) {
      dy /= dy_norm;
      if (dy.minCoeff() >= -kInfTol && inf_norm(G.transpose() * dy) <= kInfTol &&
          h.dot(dy) <= -kInfTol) {
        infeasible = true;
        break;
      }
    }
    y_prev = y;

    if (iter % (4 * kCheckInterval) == 0) {
      const double rp_rel = rp / (1.0 + std::max(inf_norm(Gx), inf_norm(z)));
      const double rd_rel =
          rd / (1.0 + std::max({2.0 * inf_norm(x), inf_norm(q), inf_norm(Gty)}));
      if (rd_rel > 0.0) {
        const double rho_new =
            std::clamp(rho * std::sqrt(rp_rel / rd_rel), 1e-6, 1e6);
        if (rho_new > 5.0 * rho || rho_new < rho / 5.0) {
          rho = rho_new;
          llt.compute((GGt + (c / rho) * Mat::Identity(ma, ma)).eval());
        }
      }
    }
  }

  sol.delta = x;
  sol.iterations = iter;
  for (Eigen::Index i = 0; i < ma; ++i) {
    sol.lambda[active[static_cast<size_t>(i)]] =
        std::max(0.0, y[i]) / row_norm[i];
  }
  fill_kkt(pb, sol);
  if (infeasible) {
    sol.status = QpStatus::infeasible;
  } else if (converged && kkt_ok(sol)) {
    sol.status = QpStatus::optimal;
  } else {
    sol.status = QpStatus::max_iter;
  }
  return sol;
}

}  // namespace sqat::qp
