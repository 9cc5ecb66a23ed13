#include <gtest/gtest.h>

#include <random>

#include "itersmooth/affine_smoother.hpp"
#include "itersmooth/experiments.hpp"
#include "itersmooth/gn_oracle.hpp"
#include "itersmooth/linearization.hpp"
#include "support/test_models.hpp"

using namespace itersmooth;

namespace {

Vector scalar(double v) { return Vector::Constant(1, v); }
Matrix scalar_m(double v) { return Matrix::Constant(1, 1, v); }

double min_eig(const Matrix& m) { return Eigen::SelfAdjointEigenSolver<Matrix>(m).eigenvalues().minCoeff(); }

// Textbook Kalman filter and RTS smoother with explicit inverses.
TrajectoryEstimate reference_rts(const LinearGaussianSpec& s, const MeasurementSequence& y) {
  const auto K = static_cast<std::size_t>(s.horizon);
  std::vector<Vector> mp(K), mf(K);
  std::vector<Matrix> Pp(K), Pf(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (k == 0) {
      mp[0] = s.prior_mean;
      Pp[0] = s.prior_cov;
    } else {
      mp[k] = s.A * mf[k - 1] + s.a;
      Pp[k] = s.A * Pf[k - 1] * s.A.transpose() + s.Q;
    }
    const Matrix S = s.C * Pp[k] * s.C.transpose() + s.R;
    const Matrix G = Pp[k] * s.C.transpose() * S.inverse();
    mf[k] = mp[k] + G * (y[k] - s.C * mp[k] - s.c);
    Pf[k] = Pp[k] - G * S * G.transpose();
  }
  TrajectoryEstimate out;
  out.means = mf;
  out.covs = Pf;
  for (std::size_t k = K - 1; k-- > 0;) {
    const Matrix G = Pf[k] * s.A.transpose() * Pp[k + 1].inverse();
    out.means[k] = mf[k] + G * (out.means[k + 1] - mp[k + 1]);
    out.covs[k] = Pf[k] + G * (out.covs[k + 1] - Pp[k + 1]) * G.transpose();
  }
  return out;
}

AffineParams exact_params(const LinearGaussianSpec& s) {
  AffineParams p;
  const Index dx = s.A.rows(), dy = s.C.rows();
  for (Index k = 0; k + 1 < s.horizon; ++k) p.motion.push_back({s.A, s.a, Matrix::Zero(dx, dx)});
  for (Index k = 0; k < s.horizon; ++k) p.measurement.push_back({s.C, s.c, Matrix::Zero(dy, dy)});
  return p;
}

}  // namespace

TEST(KfPredict, IdentityDoublesCovariance) {
  const Gaussian g = kf_predict(Gaussian(Vector::Zero(2), Matrix::Identity(2, 2)), Matrix::Identity(2, 2),
                                Vector::Zero(2), Matrix::Identity(2, 2));
  EXPECT_TRUE(g.mean().isZero());
  EXPECT_TRUE(g.cov().isApprox(2.0 * Matrix::Identity(2, 2)));
}

TEST(KfPredict, ScalarArithmetic) {
  const Gaussian g = kf_predict(Gaussian(scalar(1.0), scalar_m(1.0)), scalar_m(2.0), scalar(1.0), scalar_m(1.0));
  EXPECT_DOUBLE_EQ(g.mean()(0), 3.0);
  EXPECT_DOUBLE_EQ(g.cov()(0, 0), 5.0);
}

TEST(KfPredict, ErrorCovarianceInflates) {
  std::mt19937_64 rng(1);
  const Gaussian b(testsupport::random_vector(rng, 3), testsupport::random_spd(rng, 3));
  const Matrix F = testsupport::random_matrix(rng, 3, 3);
  const Matrix Q = testsupport::random_spd(rng, 3);
  const Matrix Omega = testsupport::random_spd(rng, 3, 0.01);
  const Gaussian plain = kf_predict(b, F, Vector::Zero(3), Q);
  const Gaussian inflated = kf_predict(b, F, Vector::Zero(3), Q + Omega);
  EXPECT_GT(min_eig(inflated.cov() - plain.cov()), 0.0);
}

TEST(KfPredict, RejectsDimensionMismatch) {
  EXPECT_THROW(kf_predict(Gaussian(Vector::Zero(2), Matrix::Identity(2, 2)), Matrix::Identity(3, 3),
                          Vector::Zero(3), Matrix::Identity(3, 3)),
               std::invalid_argument);
}

TEST(KfUpdate, ScalarConjugate) {
  const Gaussian g =
      kf_update(Gaussian(scalar(0.0), scalar_m(1.0)), scalar(2.0), scalar_m(1.0), scalar(0.0), scalar_m(1.0));
  EXPECT_DOUBLE_EQ(g.mean()(0), 1.0);
  EXPECT_DOUBLE_EQ(g.cov()(0, 0), 0.5);
}

TEST(KfUpdate, ZeroInnovationKeepsMean) {
  std::mt19937_64 rng(2);
  const Gaussian b(testsupport::random_vector(rng, 3), testsupport::random_spd(rng, 3));
  const Matrix H = testsupport::random_matrix(rng, 2, 3);
  const Vector c = testsupport::random_vector(rng, 2);
  const Gaussian g = kf_update(b, H * b.mean() + c, H, c, testsupport::random_spd(rng, 2));
  EXPECT_LT((g.mean() - b.mean()).norm(), 1e-12);
}

TEST(KfUpdate, HugeNoiseIsUninformative) {
  std::mt19937_64 rng(3);
  const Gaussian b(testsupport::random_vector(rng, 3), testsupport::random_spd(rng, 3));
  const Matrix H = testsupport::random_matrix(rng, 2, 3);
  const Gaussian g = kf_update(b, Vector::Constant(2, 5.0), H, Vector::Zero(2), 1e12 * Matrix::Identity(2, 2));
  EXPECT_LT((g.mean() - b.mean()).norm(), 1e-6);
  EXPECT_LT((g.cov() - b.cov()).norm(), 1e-6);
}

TEST(KfUpdate, NeverIncreasesCovariance) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Index d = 1 + trial % 5, m = 1 + trial % 3;
    const Gaussian b(testsupport::random_vector(rng, d), testsupport::random_spd(rng, d));
    const Matrix H = testsupport::random_matrix(rng, m, d);
    for (auto form : {CovarianceForm::Standard, CovarianceForm::Joseph}) {
      const Gaussian g = kf_update(b, testsupport::random_vector(rng, m), H, Vector::Zero(m),
                                   testsupport::random_spd(rng, m), form);
      EXPECT_GE(min_eig(b.cov() - g.cov()), -1e-10);
      EXPECT_GE(min_eig(g.cov()), -1e-10);
    }
  }
}

TEST(KfUpdate, JosephMatchesStandardForm) {
  std::mt19937_64 rng(5);
  const Gaussian b(testsupport::random_vector(rng, 4), testsupport::random_spd(rng, 4));
  const Matrix H = testsupport::random_matrix(rng, 2, 4);
  const Matrix R = testsupport::random_spd(rng, 2);
  const Vector y = testsupport::random_vector(rng, 2);
  const Gaussian s = kf_update(b, y, H, Vector::Zero(2), R, CovarianceForm::Standard);
  const Gaussian j = kf_update(b, y, H, Vector::Zero(2), R, CovarianceForm::Joseph);
  EXPECT_LT((s.cov() - j.cov()).norm(), 1e-10);
}

TEST(KfUpdate, EmptyMeasurementIsSkipped) {
  const Gaussian b(Vector::Ones(2), Matrix::Identity(2, 2));
  const Gaussian g = kf_update(b, Vector(0), Matrix(0, 2), Vector(0), Matrix(0, 0));
  EXPECT_EQ(g.mean(), b.mean());
  EXPECT_EQ(g.cov(), b.cov());
}

TEST(LmPseudoUpdate, ScalarArithmetic) {
  const Gaussian g = lm_pseudo_update(Gaussian(scalar(0.0), scalar_m(1.0)), scalar(2.0), 1.0, scalar_m(1.0));
  EXPECT_DOUBLE_EQ(g.mean()(0), 1.0);
  EXPECT_DOUBLE_EQ(g.cov()(0, 0), 0.5);
}

TEST(LmPseudoUpdate, VanishingLambdaLeavesBeliefUnchanged) {
  std::mt19937_64 rng(6);
  const Gaussian b(testsupport::random_vector(rng, 3), testsupport::random_spd(rng, 3));
  const Gaussian g = lm_pseudo_update(b, testsupport::random_vector(rng, 3), 1e-12, Matrix::Identity(3, 3));
  EXPECT_LT((g.mean() - b.mean()).norm(), 1e-6);
  EXPECT_LT((g.cov() - b.cov()).norm(), 1e-6);
}

TEST(LmPseudoUpdate, EqualsKalmanUpdateWithIdentityObservation) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> log_lambda(-3.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Index d = 1 + trial % 6;
    const Gaussian b(testsupport::random_vector(rng, d), testsupport::random_spd(rng, d));
    const Vector anchor = testsupport::random_vector(rng, d);
    const Matrix S = testsupport::random_spd(rng, d);
    const double lambda = std::pow(10.0, log_lambda(rng));
    const Gaussian lm = lm_pseudo_update(b, anchor, lambda, S);
    const Gaussian kf = kf_update(b, anchor, Matrix::Identity(d, d), Vector::Zero(d), S / lambda);
    EXPECT_LT((lm.mean() - kf.mean()).norm(), 1e-10);
    EXPECT_LT((lm.cov() - kf.cov()).norm(), 1e-10);
  }
}

TEST(LmPseudoUpdate, RejectsNonPositiveLambda) {
  const Gaussian b(scalar(0.0), scalar_m(1.0));
  EXPECT_THROW(lm_pseudo_update(b, scalar(1.0), 0.0, scalar_m(1.0)), std::invalid_argument);
  EXPECT_THROW(lm_pseudo_update(b, scalar(1.0), -1.0, scalar_m(1.0)), std::invalid_argument);
}

TEST(RtsBackward, SingleStepEqualsFiltered) {
  FilterCache cache;
  cache.predicted.emplace_back(Vector::Zero(2), Matrix::Identity(2, 2));
  cache.updated.emplace_back(Vector::Ones(2), 0.5 * Matrix::Identity(2, 2));
  const TrajectoryEstimate t = rts_backward(cache, AffineParams{});
  EXPECT_EQ(t.means[0], cache.updated[0].mean());
  EXPECT_EQ(t.covs[0], cache.updated[0].cov());
}

TEST(RtsBackward, NoCouplingKeepsFiltered) {
  std::mt19937_64 rng(8);
  FilterCache cache;
  AffineParams params;
  for (int k = 0; k < 4; ++k) {
    cache.predicted.emplace_back(testsupport::random_vector(rng, 2), testsupport::random_spd(rng, 2));
    cache.updated.emplace_back(testsupport::random_vector(rng, 2), testsupport::random_spd(rng, 2));
    if (k < 3) params.motion.push_back({Matrix::Zero(2, 2), Vector::Zero(2), Matrix::Zero(2, 2)});
  }
  const TrajectoryEstimate t = rts_backward(cache, params);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_LT((t.means[k] - cache.updated[k].mean()).norm(), 1e-14);
    EXPECT_LT((t.covs[k] - cache.updated[k].cov()).norm(), 1e-14);
  }
}

TEST(AffineSmooth, MatchesDenseMapSolution) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto spec = random_linear_spec(seed, 5, 2, 1);
    const NonlinearSSM model = make_linear_model(spec);
    const Simulation sim = simulate(model, seed);
    const TrajectoryEstimate t = affine_smooth(model, exact_params(spec), sim.measurements);
    const StackedResidualProblem prob = build_ieks_problem(model, sim.measurements);
    const Vector map = gn_step(prob, Vector::Zero(prob.cols()));
    EXPECT_LT(testsupport::relative_error(t.means, unstack(map, 5, 2)), 1e-8);
  }
}

TEST(AffineSmooth, MatchesTextbookKalmanRts) {
  const auto spec = random_linear_spec(21, 30, 3, 2);
  const NonlinearSSM model = make_linear_model(spec);
  const Simulation sim = simulate(model, 5);
  const TrajectoryEstimate ours = affine_smooth(model, exact_params(spec), sim.measurements);
  const TrajectoryEstimate ref = reference_rts(spec, sim.measurements);
  EXPECT_LT(testsupport::relative_error(ours.means, ref.means), 1e-12);
  for (std::size_t k = 0; k < ref.covs.size(); ++k) EXPECT_LT((ours.covs[k] - ref.covs[k]).norm(), 1e-12);
}

TEST(AffineSmooth, HugeLambdaPinsAnchor) {
  const auto spec = random_linear_spec(22, 10, 3, 2);
  const NonlinearSSM model = make_linear_model(spec);
  const Simulation sim = simulate(model, 6);
  std::mt19937_64 rng(9);
  std::vector<Vector> anchor;
  for (int k = 0; k < 10; ++k) anchor.push_back(testsupport::random_vector(rng, 3));
  const std::vector<Matrix> S(10, Matrix::Identity(3, 3));
  const TrajectoryEstimate t =
      affine_smooth(model, exact_params(spec), sim.measurements, LMRegularization{1e12, &S, &anchor});
  EXPECT_LT(testsupport::relative_error(t.means, anchor), 1e-4);
}

TEST(AffineSmooth, RegularizedSmoothMatchesDenseLmStep) {
  const auto spec = random_linear_spec(23, 8, 3, 2);
  const NonlinearSSM model = make_linear_model(spec);
  const Simulation sim = simulate(model, 7);
  std::mt19937_64 rng(10);
  std::vector<Vector> anchor;
  std::vector<Matrix> S;
  for (int k = 0; k < 8; ++k) {
    anchor.push_back(testsupport::random_vector(rng, 3));
    S.push_back(testsupport::random_spd(rng, 3));
  }
  const StackedResidualProblem prob = build_ieks_problem(model, sim.measurements);
  for (double lambda : {0.01, 1.0, 100.0}) {
    const TrajectoryEstimate t =
        affine_smooth(model, exact_params(spec), sim.measurements, LMRegularization{lambda, &S, &anchor});
    const Vector dense = lm_step(prob, stack(anchor), lambda, S);
    EXPECT_LT(testsupport::relative_error(t.means, unstack(dense, 8, 3)), 1e-8);
  }
}

TEST(AffineSmooth, OutputCovariancesArePsd) {
  const auto spec = random_linear_spec(24, 20, 4, 1);
  const NonlinearSSM model = make_linear_model(spec);
  const Simulation sim = simulate(model, 8);
  const TrajectoryEstimate t = affine_smooth(model, exact_params(spec), sim.measurements);
  for (const auto& c : t.covs) {
    EXPECT_LT((c - c.transpose()).norm(), 1e-14);
    EXPECT_GE(min_eig(c), -1e-10);
  }
}

TEST(AffineSmooth, MissingMeasurementsAreSkipped) {
  const auto spec = random_linear_spec(25, 6, 2, 1);
  TimeVaryingMap f{[&](Index, const Vector& x) -> Vector { return spec.A * x + spec.a; }, {}};
  TimeVaryingMap h{[&](Index k, const Vector& x) -> Vector {
                     return k == 2 ? Vector(0) : Vector(spec.C * x + spec.c);
                   },
                   {}};
  std::vector<Matrix> R(6, spec.R);
  R[2] = Matrix(0, 0);
  const NonlinearSSM model(6, Gaussian(spec.prior_mean, spec.prior_cov), f, std::vector<Matrix>(5, spec.Q), h, R);
  const Simulation sim = simulate(model, 9);
  ASSERT_EQ(sim.measurements[2].size(), 0);
  AffineParams p = exact_params(spec);
  p.measurement[2] = {Matrix(0, 2), Vector(0), Matrix(0, 0)};
  const TrajectoryEstimate t = affine_smooth(model, p, sim.measurements);
  const Vector dense = gn_step(build_ieks_problem(model, sim.measurements), Vector::Zero(12));
  EXPECT_LT(testsupport::relative_error(t.means, unstack(dense, 6, 2)), 1e-8);
}
