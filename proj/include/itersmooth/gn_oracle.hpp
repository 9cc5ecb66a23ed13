#pragma once

/**
 * Dense stacked least-squares form of the smoothing problems and
 * their Gauss–Newton / Levenberg–Marquardt steps.
 *
 * This is a reference implementation for tests: every solve is a dense QR
 * on the full (N × K·d_x) Jacobian, so it is only practical for small
 * problems (K·d_x up to a few thousand).
 */

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include <Eigen/QR>

#include "itersmooth/cost_functions.hpp"
#include "itersmooth/linearization.hpp"
#include "itersmooth/state_space.hpp"

namespace itersmooth {

/**
 * ρ(x) = W r(x) with raw residuals stacked as
 *   [x_0 - m_0 ; x_1 - f_0(x_0) ; ... ; y_0 - h_0(x_0) ; ...]
 * and W the block inverse Cholesky factor of the noise covariances, so that
 * ½‖ρ(x)‖² is the smoothing cost.
 */
struct StackedResidualProblem {
  Index horizon = 0;
  Index state_dim = 0;
  Index rows = 0;
  std::function<Vector(const Vector&)> residual;
  std::function<Matrix(const Vector&)> jacobian;

  Index cols() const { return horizon * state_dim; }
  double cost(const Vector& x) const { return 0.5 * residual(x).squaredNorm(); }
  /// First row of the dynamics block for transition k -> k+1.
  Index dynamics_row(Index k) const { return state_dim * (k + 1); }
  /// First row of the measurement block at timestep k.
  Index measurement_row(Index k) const { return state_dim * horizon + measurement_offsets.at(static_cast<std::size_t>(k)); }

  std::vector<Index> measurement_offsets;
};

namespace detail {

// L⁻¹ for Σ = L Lᵀ.
inline Matrix inverse_cholesky_factor(const Matrix& cov, const char* what) {
  const Eigen::LLT<Matrix> llt = cholesky_or_throw(cov, what);
  const Matrix L = llt.matrixL();
  return L.triangularView<Eigen::Lower>().solve(Matrix::Identity(cov.rows(), cov.cols()));
}

struct StackedLayout {
  Index K = 0;
  Index dx = 0;
  Index rows = 0;
  std::vector<Index> meas_offsets;
};

inline StackedLayout layout_of(const NonlinearSSM& model) {
  StackedLayout lay;
  lay.K = model.horizon();
  lay.dx = model.state_dim();
  Index offset = 0;
  for (Index k = 0; k < lay.K; ++k) {
    lay.meas_offsets.push_back(offset);
    offset += model.meas_dim(k);
  }
  lay.rows = lay.K * lay.dx + offset;
  return lay;
}

struct StackedWeights {
  Matrix prior;
  std::vector<Matrix> motion;
  std::vector<Matrix> meas;
};

/**
 * Generic assembly. `motion_mean(k, x)` and `meas_mean(k, x)` are the
 * predicted values; `motion_gain`, `meas_gain` their Jacobians.
 */
template <typename MotionMean, typename MotionGain, typename MeasMean, typename MeasGain>
StackedResidualProblem assemble(const NonlinearSSM& model, const MeasurementSequence& y, StackedWeights w,
                                MotionMean motion_mean, MotionGain motion_gain, MeasMean meas_mean,
                                MeasGain meas_gain) {
  const StackedLayout lay = layout_of(model);
  StackedResidualProblem prob;
  prob.horizon = lay.K;
  prob.state_dim = lay.dx;
  prob.rows = lay.rows;
  prob.measurement_offsets = lay.meas_offsets;
  auto weights = std::make_shared<const StackedWeights>(std::move(w));
  const Index K = lay.K;
  const Index dx = lay.dx;
  prob.residual = [&model, &y, weights, lay, K, dx, motion_mean, meas_mean](const Vector& x) {
    if (x.size() != K * dx) throw std::invalid_argument("StackedResidualProblem: wrong stacked length");
    Vector r(lay.rows);
    r.head(dx) = weights->prior * (x.head(dx) - model.prior().mean());
    for (Index k = 0; k + 1 < K; ++k) {
      const Vector raw = x.segment((k + 1) * dx, dx) - motion_mean(k, Vector(x.segment(k * dx, dx)));
      r.segment((k + 1) * dx, dx) = weights->motion[static_cast<std::size_t>(k)] * raw;
    }
    for (Index k = 0; k < K; ++k) {
      const Index dy = model.meas_dim(k);
      if (dy == 0) continue;
      const auto ks = static_cast<std::size_t>(k);
      const Vector raw = model.measurement_residual(k, y[ks], meas_mean(k, Vector(x.segment(k * dx, dx))));
      r.segment(K * dx + lay.meas_offsets[ks], dy) = weights->meas[ks] * raw;
    }
    return r;
  };
  prob.jacobian = [&model, weights, lay, K, dx, motion_gain, meas_gain](const Vector& x) {
    if (x.size() != K * dx) throw std::invalid_argument("StackedResidualProblem: wrong stacked length");
    Matrix J = Matrix::Zero(lay.rows, K * dx);
    J.block(0, 0, dx, dx) = weights->prior;
    for (Index k = 0; k + 1 < K; ++k) {
      const Matrix& Wk = weights->motion[static_cast<std::size_t>(k)];
      J.block((k + 1) * dx, (k + 1) * dx, dx, dx) = Wk;
      J.block((k + 1) * dx, k * dx, dx, dx) = -Wk * motion_gain(k, Vector(x.segment(k * dx, dx)));
    }
    for (Index k = 0; k < K; ++k) {
      const Index dy = model.meas_dim(k);
      if (dy == 0) continue;
      const auto ks = static_cast<std::size_t>(k);
      J.block(K * dx + lay.meas_offsets[ks], k * dx, dy, dx) =
          -weights->meas[ks] * meas_gain(k, Vector(x.segment(k * dx, dx)));
    }
    return J;
  };
  return prob;
}

}  // namespace detail

/// Stacked form of ieks_cost with Taylor Jacobians.
inline StackedResidualProblem build_ieks_problem(const NonlinearSSM& model, const MeasurementSequence& y) {
  validate_measurements(model, y);
  detail::StackedWeights w;
  w.prior = detail::inverse_cholesky_factor(model.prior().cov(), "prior");
  for (Index k = 0; k + 1 < model.horizon(); ++k) {
    w.motion.push_back(detail::inverse_cholesky_factor(model.motion_noise(k), "Q"));
  }
  for (Index k = 0; k < model.horizon(); ++k) {
    w.meas.push_back(model.meas_dim(k) > 0 ? detail::inverse_cholesky_factor(model.meas_noise(k), "R") : Matrix());
  }
  return detail::assemble(
      model, y, std::move(w), [&model](Index k, const Vector& x) { return model.f(k, x); },
      [&model](Index k, const Vector& x) { return model.f_jacobian(k, x); },
      [&model](Index k, const Vector& x) { return model.h(k, x); },
      [&model](Index k, const Vector& x) { return model.h_jacobian(k, x); });
}

/**
 * Stacked form of ipls_cost for a frozen context. The expectations and
 * their Jacobians (the SLR gains Ψᵀ P̂⁻¹ under N(x, P̂_k)) are recomputed
 * here from sigma points rather than taken from the context's cache.
 */
inline StackedResidualProblem build_ipls_problem(const NonlinearSSM& model, const MeasurementSequence& y,
                                                 const IplsCostContext& ctx) {
  validate_measurements(model, y);
  const Index K = model.horizon();
  detail::StackedWeights w;
  w.prior = detail::inverse_cholesky_factor(model.prior().cov(), "prior");
  for (Index k = 0; k + 1 < K; ++k) {
    w.motion.push_back(detail::inverse_cholesky_factor(
        model.motion_noise(k) + ctx.omega()[static_cast<std::size_t>(k)], "Q + Omega"));
  }
  for (Index k = 0; k < K; ++k) {
    w.meas.push_back(model.meas_dim(k) > 0
                         ? detail::inverse_cholesky_factor(
                               model.meas_noise(k) + ctx.gamma()[static_cast<std::size_t>(k)], "R + Gamma")
                         : Matrix());
  }
  auto covs = std::make_shared<const std::vector<Matrix>>(ctx.covs());
  auto llts = std::make_shared<std::vector<Eigen::LLT<Matrix>>>();
  for (const auto& P : *covs) llts->push_back(cholesky_or_throw(P, "IPLS covariance"));
  const SigmaScheme scheme = ctx.scheme();

  auto moments = [covs, scheme](auto&& map, Index k, const Vector& x) {
    const Gaussian g(x, (*covs)[static_cast<std::size_t>(k)]);
    return slr_moments(map, g, sigma_points(g, scheme));
  };
  auto gain = [llts](const SLRMoments& m, Index k) -> Matrix {
    return (*llts)[static_cast<std::size_t>(k)].solve(m.Psi).transpose();
  };
  return detail::assemble(
      model, y, std::move(w),
      [&model, moments](Index k, const Vector& x) {
        return moments([&](const Vector& z) { return model.f(k, z); }, k, x).zbar;
      },
      [&model, moments, gain](Index k, const Vector& x) {
        return gain(moments([&](const Vector& z) { return model.f(k, z); }, k, x), k);
      },
      [&model, moments](Index k, const Vector& x) {
        return moments([&](const Vector& z) { return model.h(k, z); }, k, x).zbar;
      },
      [&model, moments, gain](Index k, const Vector& x) {
        return gain(moments([&](const Vector& z) { return model.h(k, z); }, k, x), k);
      });
}

/// argmin_x ½‖ρ(x̂) + J(x̂)(x - x̂)‖², by column-pivoted QR.
inline Vector gn_step(const StackedResidualProblem& problem, const Vector& xhat) {
  const Matrix J = problem.jacobian(xhat);
  const Vector r = problem.residual(xhat);
  Eigen::ColPivHouseholderQR<Matrix> qr(J);
  if (qr.rank() < J.cols()) throw NumericalError("gn_step: Jacobian is rank deficient");
  return xhat - qr.solve(r);
}

/// argmin_x ½‖ρ(x̂) + J(x̂)(x - x̂)‖² + ½ λ Σ_k (x_k - x̂_k)ᵀ S_k⁻¹ (x_k - x̂_k).
inline Vector lm_step(const StackedResidualProblem& problem, const Vector& xhat, double lambda,
                      const std::vector<Matrix>& scaling) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("lm_step: lambda must be nonnegative");
  if (lambda == 0.0) return gn_step(problem, xhat);
  const Index K = problem.horizon;
  const Index dx = problem.state_dim;
  if (static_cast<Index>(scaling.size()) != K) throw std::invalid_argument("lm_step: need one S_k per timestep");
  const Matrix J = problem.jacobian(xhat);
  const Vector r = problem.residual(xhat);
  Matrix A = Matrix::Zero(J.rows() + K * dx, J.cols());
  A.topRows(J.rows()) = J;
  const double root = std::sqrt(lambda);
  for (Index k = 0; k < K; ++k) {
    A.block(J.rows() + k * dx, k * dx, dx, dx) =
        root * detail::inverse_cholesky_factor(scaling[static_cast<std::size_t>(k)], "S");
  }
  Vector b = Vector::Zero(A.rows());
  b.head(r.size()) = r;
  Eigen::ColPivHouseholderQR<Matrix> qr(A);
  if (qr.rank() < A.cols()) throw NumericalError("lm_step: regularized Jacobian is rank deficient");
  return xhat - qr.solve(b);
}

}  // namespace itersmooth
