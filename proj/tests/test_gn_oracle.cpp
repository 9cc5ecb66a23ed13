#include <gtest/gtest.h>

#include <random>

#include "itersmooth/experiments.hpp"
#include "itersmooth/gn_oracle.hpp"
#include "itersmooth/iterative_smoothers.hpp"
#include "support/test_models.hpp"

using namespace itersmooth;

namespace {

Matrix fd_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& x, double h = 1e-6) {
  const Vector f0 = f(x);
  Matrix J(f0.size(), x.size());
  for (Index j = 0; j < x.size(); ++j) {
    Vector xp = x, xm = x;
    xp(j) += h;
    xm(j) -= h;
    J.col(j) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return J;
}

StackedResidualProblem identity_problem(Index n) {
  StackedResidualProblem p;
  p.horizon = 1;
  p.state_dim = n;
  p.rows = n;
  p.residual = [](const Vector& x) { return x; };
  p.jacobian = [n](const Vector&) { return Matrix(Matrix::Identity(n, n)); };
  return p;
}

IplsCostContext context_at(const NonlinearSSM& model, const TrajectoryEstimate& traj) {
  return IplsCostContext::from_linearization(model, traj, linearize_ssm(model, traj, LinearizationConfig::slr()));
}

}  // namespace

TEST(BuildIeksProblem, JacobianMatchesFiniteDifferences) {
  const NonlinearSSM model = make_ct_model(testsupport::coarse_ct_scenario(5));
  const Simulation sim = simulate(model, 1);
  const StackedResidualProblem prob = build_ieks_problem(model, sim.measurements);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    Vector x = stack(sim.states) + testsupport::random_vector(rng, 25, 0.1);
    const Matrix J = prob.jacobian(x);
    const Matrix fd = fd_jacobian(prob.residual, x);
    EXPECT_LE((J - fd).cwiseAbs().maxCoeff(), 1e-5 * std::max(1.0, J.cwiseAbs().maxCoeff()));
  }
}

TEST(BuildIeksProblem, SparsityIsBlockBidiagonal) {
  const NonlinearSSM model = make_ct_model(testsupport::coarse_ct_scenario(6));
  const Simulation sim = simulate(model, 3);
  const StackedResidualProblem prob = build_ieks_problem(model, sim.measurements);
  const Matrix J = prob.jacobian(stack(sim.states));
  const Index dx = 5;
  for (Index k = 0; k < 6; ++k) {
    for (Index j = 0; j < 6; ++j) {
      const bool allowed = j == k || (k > 0 && j == k - 1);
      if (!allowed) EXPECT_TRUE(J.block(k * dx, j * dx, dx, dx).isZero(0.0)) << k << "," << j;
    }
    const Index row = prob.measurement_row(k);
    for (Index j = 0; j < 6; ++j) {
      if (j != k) EXPECT_TRUE(J.block(row, j * dx, model.meas_dim(k), dx).isZero(0.0)) << k << "," << j;
    }
    EXPECT_TRUE(J.block(row, k * dx + 2, model.meas_dim(k), 3).isZero(0.0));
  }
  EXPECT_EQ(prob.rows, J.rows());
  EXPECT_EQ(prob.dynamics_row(0), dx);
}

TEST(BuildIeksProblem, LinearModelIsAffine) {
  const NonlinearSSM model = testsupport::random_linear_model(4, 8, 3, 2);
  const Simulation sim = simulate(model, 5);
  const StackedResidualProblem prob = build_ieks_problem(model, sim.measurements);
  std::mt19937_64 rng(6);
  const Vector a = testsupport::random_vector(rng, 24), b = testsupport::random_vector(rng, 24);
  EXPECT_LT((prob.jacobian(a) - prob.jacobian(b)).norm(), 1e-12 * prob.jacobian(a).norm());
  const Vector lhs = prob.residual(b) - prob.residual(a);
  EXPECT_LT((lhs - prob.jacobian(a) * (b - a)).norm(), 1e-9 * std::max(1.0, lhs.norm()));
}

TEST(BuildIplsProblem, LinearModelReducesToIeksProblem) {
  const NonlinearSSM model = testsupport::random_linear_model(7, 8, 3, 2);
  const Simulation sim = simulate(model, 8);
  TrajectoryEstimate traj = TrajectoryEstimate::constant(8, Vector::Zero(3), Matrix::Identity(3, 3));
  traj.means = sim.states;
  const StackedResidualProblem ieks = build_ieks_problem(model, sim.measurements);
  const StackedResidualProblem ipls = build_ipls_problem(model, sim.measurements, context_at(model, traj));
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const Vector x = testsupport::random_vector(rng, 24, 3.0);
    const Vector ra = ieks.residual(x), rb = ipls.residual(x);
    EXPECT_LT((ra - rb).norm(), 1e-9 * std::max(1.0, ra.norm()));
    EXPECT_LT((ieks.jacobian(x) - ipls.jacobian(x)).norm(), 1e-9 * ieks.jacobian(x).norm());
  }
}

TEST(BuildIplsProblem, SlrJacobianMatchesFiniteDifferences) {
  // Quadratic dynamics and measurements, for which the SLR gain is exactly the
  // Jacobian of the sigma-point expectation.
  std::mt19937_64 rng(11);
  const Matrix A = 0.9 * Matrix::Identity(3, 3) + testsupport::random_matrix(rng, 3, 3, 0.1);
  const Matrix B = testsupport::random_matrix(rng, 3, 3, 0.2);
  const Matrix C = testsupport::random_matrix(rng, 2, 3);
  TimeVaryingMap f{[&](Index, const Vector& x) -> Vector { return A * x + 0.1 * (B * x).cwiseAbs2(); }, {}};
  TimeVaryingMap h{[&](Index, const Vector& x) -> Vector { return C * x + Vector(x.head(2).cwiseAbs2()); }, {}};
  const NonlinearSSM model(5, Gaussian(Vector::Zero(3), Matrix::Identity(3, 3)), f,
                           std::vector<Matrix>(4, 0.1 * Matrix::Identity(3, 3)), h,
                           std::vector<Matrix>(5, 0.2 * Matrix::Identity(2, 2)));
  const Simulation sim = simulate(model, 10);
  const TrajectoryEstimate init = non_iterative_smoother(model, sim.measurements, LinearizationConfig::slr());
  const StackedResidualProblem prob = build_ipls_problem(model, sim.measurements, context_at(model, init));
  for (int trial = 0; trial < 5; ++trial) {
    const Vector x = stack(init.means) + testsupport::random_vector(rng, 15, 0.1);
    const Matrix J = prob.jacobian(x);
    const Matrix fd = fd_jacobian(prob.residual, x);
    EXPECT_LE((J - fd).cwiseAbs().maxCoeff(), 1e-6 * std::max(1.0, J.cwiseAbs().maxCoeff()));
  }
}

TEST(BuildIplsProblem, RejectsSingularCovariance) {
  const NonlinearSSM model = make_ct_model(testsupport::coarse_ct_scenario(4));
  const Simulation sim = simulate(model, 12);
  Matrix singular = Matrix::Identity(5, 5);
  singular(4, 4) = 0.0;
  std::vector<Matrix> gamma;
  for (Index k = 0; k < 4; ++k) gamma.push_back(Matrix::Zero(model.meas_dim(k), model.meas_dim(k)));
  const IplsCostContext ctx(model, std::vector<Matrix>(4, singular), std::vector<Matrix>(3, Matrix::Zero(5, 5)), gamma);
  EXPECT_THROW(build_ipls_problem(model, sim.measurements, ctx), NumericalError);
}

TEST(GnStep, IdentityResidualGoesToZero) {
  const Vector x = gn_step(identity_problem(1), Vector::Constant(1, 5.0));
  EXPECT_EQ(x(0), 0.0);
}

TEST(GnStep, AffineProblemSolvedInOneStep) {
  const NonlinearSSM model = testsupport::random_linear_model(13, 10, 3, 2);
  const Simulation sim = simulate(model, 14);
  const StackedResidualProblem prob = build_ieks_problem(model, sim.measurements);
  std::mt19937_64 rng(15);
  const Vector a = gn_step(prob, testsupport::random_vector(rng, 30, 5.0));
  const Vector b = gn_step(prob, testsupport::random_vector(rng, 30, 5.0));
  EXPECT_LT((a - b).norm(), 1e-9 * std::max(1.0, a.norm()));
  EXPECT_LT((gn_step(prob, a) - a).norm(), 1e-9 * std::max(1.0, a.norm()));
}

TEST(GnStep, RankDeficiencyThrows) {
  StackedResidualProblem p = identity_problem(2);
  p.jacobian = [](const Vector&) {
    Matrix J = Matrix::Identity(2, 2);
    J(1, 1) = 0.0;
    return J;
  };
  EXPECT_THROW(gn_step(p, Vector::Ones(2)), NumericalError);
  EXPECT_NO_THROW(lm_step(p, Vector::Ones(2), 1.0, {Matrix::Identity(2, 2)}));
}

TEST(LmStep, ZeroLambdaIsGnStep) {
  const NonlinearSSM model = make_ct_model(testsupport::coarse_ct_scenario(6));
  const Simulation sim = simulate(model, 16);
  const StackedResidualProblem prob = build_ieks_problem(model, sim.measurements);
  const Vector x = stack(sim.states);
  EXPECT_EQ(lm_step(prob, x, 0.0, std::vector<Matrix>(6, Matrix::Identity(5, 5))), gn_step(prob, x));
}

TEST(LmStep, HugeLambdaStaysAtAnchor) {
  const NonlinearSSM model = make_ct_model(testsupport::coarse_ct_scenario(6));
  const Simulation sim = simulate(model, 17);
  const StackedResidualProblem prob = build_ieks_problem(model, sim.measurements);
  const Vector x = stack(sim.states) + Vector::Constant(30, 0.1);
  EXPECT_LT((lm_step(prob, x, 1e12, std::vector<Matrix>(6, Matrix::Identity(5, 5))) - x).norm(), 1e-4);
}

TEST(LmStep, RejectsNegativeLambda) {
  EXPECT_THROW(lm_step(identity_problem(1), Vector::Ones(1), -1.0, {Matrix::Identity(1, 1)}), std::invalid_argument);
}
