#include <doctest.h>

#include "sqat/qpsolve.hpp"
#include "sqat/rng.hpp"
#include "oracles.hpp"

using namespace sqat;
using qp::QpProblem;
using qp::QpSolution;
using qp::QpStatus;

namespace {

QpProblem random_feasible(Rng& rng, int n, int m) {
  QpProblem pb;
  pb.d.resize(n);
  for (int i = 0; i < n; ++i) pb.d[i] = rng.normal();
  pb.G.resize(m, n);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) pb.G(i, j) = rng.normal();
  }
  // feasibility guaranteed by shifting h to hold at a random point
  Eigen::VectorXd feas(n);
  for (int i = 0; i < n; ++i) feas[i] = rng.normal();
  pb.h = pb.G * feas;
  for (int i = 0; i < m; ++i) pb.h[i] += std::abs(rng.normal());
  return pb;
}

}  // namespace

TEST_CASE("unconstrained solve returns -d exactly") {
  QpProblem pb;
  pb.d.resize(3);
  pb.d << 1.0, -2.0, 0.5;
  pb.G.resize(0, 3);
  pb.h.resize(0);
  const QpSolution sol = qp::solve(pb);
  CHECK(sol.status == QpStatus::optimal);
  CHECK(sol.delta.isApprox(-pb.d, 0.0));
  CHECK(sol.primal_residual == 0.0);
  CHECK(sol.dual_residual == 0.0);
}

TEST_CASE("projection of the origin onto a halfspace") {
  QpProblem pb;
  pb.d = Eigen::VectorXd::Zero(4);
  pb.G = Eigen::MatrixXd::Zero(1, 4);
  pb.G(0, 0) = -1.0;  // -delta_1 <= -1, i.e. delta_1 >= 1
  pb.h.resize(1);
  pb.h << -1.0;
  const QpSolution sol = qp::solve(pb);
  CHECK(sol.status == QpStatus::optimal);
  Eigen::VectorXd expect(4);
  expect << 1.0, 0.0, 0.0, 0.0;
  CHECK((sol.delta - expect).lpNorm<Eigen::Infinity>() <= 1e-7);
}

TEST_CASE("random feasible instances match the dual projected-gradient oracle") {
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    const QpProblem pb = random_feasible(rng, 20, 5);
    const QpSolution sol = qp::solve(pb);
    REQUIRE(sol.status == QpStatus::optimal);
    CHECK(sol.primal_residual <= 1e-6);
    CHECK(sol.dual_residual <= 1e-6);
    CHECK(sol.complementarity_residual <= 1e-6);

    const Eigen::VectorXd oracle = testing::qp_dual_pgd(pb);
    CHECK((sol.delta - oracle).lpNorm<Eigen::Infinity>() <= 1e-6);

    // active constraints (positive multiplier) are tight
    const Eigen::VectorXd slack = pb.G * sol.delta - pb.h;
    for (int j = 0; j < 5; ++j) {
      if (sol.lambda[j] > 1e-8) {
        CHECK(std::abs(slack[j]) <= 1e-6);
      }
    }
  }
}

TEST_CASE("scaling equivariance") {
  Rng rng(5);
  const QpProblem pb = random_feasible(rng, 12, 4);
  const QpSolution base = qp::solve(pb);
  REQUIRE(base.status == QpStatus::optimal);
  for (double s : {0.5, 2.0, 10.0}) {
    QpProblem scaled = pb;
    scaled.d *= s;
    scaled.h *= s;
    const QpSolution sol = qp::solve(scaled);
    REQUIRE(sol.status == QpStatus::optimal);
    CHECK((sol.delta - s * base.delta).lpNorm<Eigen::Infinity>() <=
          1e-8 * std::max(1.0, s * base.delta.lpNorm<Eigen::Infinity>() * 10));
  }
}

TEST_CASE("contradictory constraints are reported infeasible") {
  QpProblem pb;
  pb.d = Eigen::VectorXd::Zero(3);
  pb.G.resize(2, 3);
  pb.G << 1.0, 0.0, 0.0,
         -1.0, 0.0, 0.0;
  pb.h.resize(2);
  pb.h << -1.0, -1.0;  // delta_1 <= -1 and delta_1 >= 1
  const QpSolution sol = qp::solve(pb);
  CHECK(sol.status == QpStatus::infeasible);
}

TEST_CASE("zero constraint rows") {
  QpProblem pb;
  pb.d.resize(2);
  pb.d << 1.0, 1.0;
  pb.G = Eigen::MatrixXd::Zero(1, 2);
  pb.h.resize(1);

  pb.h << 0.5;  // 0 <= 0.5 is vacuous
  QpSolution sol = qp::solve(pb);
  CHECK(sol.status == QpStatus::optimal);
  CHECK(sol.delta.isApprox(-pb.d, 0.0));

  pb.h << -0.5;  // 0 <= -0.5 can never hold
  sol = qp::solve(pb);
  CHECK(sol.status == QpStatus::infeasible);
}

TEST_CASE("dimension and finiteness validation") {
  QpProblem pb;
  pb.d.resize(2);
  pb.d << 1.0, 2.0;
  pb.G.resize(1, 3);
  pb.G << 1.0, 0.0, 0.0;
  pb.h.resize(1);
  pb.h << 1.0;
  CHECK_THROWS_AS(qp::solve(pb), std::invalid_argument);

  pb.G.resize(1, 2);
  pb.G << 1.0, std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(qp::solve(pb), std::invalid_argument);
}
