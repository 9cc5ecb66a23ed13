#pragma once

/**
 * Affine approximations of nonlinear maps: first-order Taylor
 * expansion around a point, and statistical linear regression (SLR)
 * with sigma points around a Gaussian.
 */

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "itersmooth/state_space.hpp"

namespace itersmooth {

/// Weighted point set approximating a Gaussian. Points are the columns.
struct SigmaPointSet {
  Matrix points;
  Vector mean_weights;
  Vector cov_weights;

  Index size() const { return points.cols(); }
};

enum class SigmaRule { Cubature, Unscented };

/// Sigma-point rule selection. For the unscented rule a NaN kappa means
/// kappa = 3 - d.
struct SigmaScheme {
  SigmaRule rule = SigmaRule::Cubature;
  double kappa = std::numeric_limits<double>::quiet_NaN();

  static SigmaScheme cubature() { return {}; }
  static SigmaScheme unscented(double kappa = std::numeric_limits<double>::quiet_NaN()) {
    return {SigmaRule::Unscented, kappa};
  }
};

/// SLR moments of z = g(x), x ~ N(m, P): output mean, cross-covariance
/// E[(x-m)(z-zbar)ᵀ] and output covariance.
struct SLRMoments {
  Vector zbar;
  Matrix Psi;
  Matrix Phi;
};

namespace detail {

// Lower Cholesky factor of a covariance, with one 1e-12 I jitter attempt.
inline Matrix sigma_factor(const Matrix& cov) {
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success) {
    Matrix bumped = cov;
    bumped.diagonal().array() += 1e-12;
    llt.compute(bumped);
    if (llt.info() != Eigen::Success) throw NumericalError("sigma points: Cholesky failed after jitter");
  }
  return llt.matrixL();
}

}  // namespace detail

/// Unit sigma-point offsets ξ_i and weights for dimension d; the points of
/// N(m, LLᵀ) are m + L ξ_i.
inline SigmaPointSet unit_sigma_points(Index d, const SigmaScheme& scheme) {
  if (d < 1) throw std::invalid_argument("sigma points: dimension must be positive");
  const double dd = static_cast<double>(d);
  SigmaPointSet set;
  if (scheme.rule == SigmaRule::Cubature) {
    const double scale = std::sqrt(dd);
    set.points = Matrix::Zero(d, 2 * d);
    for (Index i = 0; i < d; ++i) {
      set.points(i, i) = scale;
      set.points(i, d + i) = -scale;
    }
    set.mean_weights = Vector::Constant(2 * d, 1.0 / (2.0 * dd));
  } else {
    const double kappa = std::isnan(scheme.kappa) ? 3.0 - dd : scheme.kappa;
    if (dd + kappa <= 0.0) throw std::invalid_argument("unscented points: d + kappa must be positive");
    const double scale = std::sqrt(dd + kappa);
    set.points = Matrix::Zero(d, 2 * d + 1);
    for (Index i = 0; i < d; ++i) {
      set.points(i, 1 + i) = scale;
      set.points(i, 1 + d + i) = -scale;
    }
    set.mean_weights = Vector::Constant(2 * d + 1, 1.0 / (2.0 * (dd + kappa)));
    set.mean_weights(0) = kappa / (dd + kappa);
  }
  set.cov_weights = set.mean_weights;
  return set;
}

inline SigmaPointSet sigma_points(const Gaussian& g, const SigmaScheme& scheme) {
  SigmaPointSet set = unit_sigma_points(g.dim(), scheme);
  const Matrix factor = detail::sigma_factor(g.cov());
  set.points = (factor * set.points).colwise() + g.mean();
  return set;
}

/// 2d+1 points m ± sqrt(d+κ)·L_i and m, weights κ/(d+κ) and 1/(2(d+κ)).
inline SigmaPointSet unscented_points(const Gaussian& g, double kappa) {
  return sigma_points(g, SigmaScheme::unscented(kappa));
}

/// 2d points m ± sqrt(d)·L_i with uniform weights 1/(2d).
inline SigmaPointSet cubature_points(const Gaussian& g) { return sigma_points(g, SigmaScheme::cubature()); }

/// Sigma-point estimate of the SLR moments of `map` under `g`.
template <typename Map>
SLRMoments slr_moments(Map&& map, const Gaussian& g, const SigmaPointSet& pts) {
  const Index n = pts.size();
  if (n == 0) throw std::invalid_argument("slr_moments: empty sigma-point set");
  std::vector<Vector> outputs;
  outputs.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    outputs.push_back(map(Vector(pts.points.col(i))));
    if (!outputs.back().allFinite()) throw NumericalError("slr_moments: map returned non-finite values");
  }
  const Index dz = outputs.front().size();
  SLRMoments m;
  m.zbar = Vector::Zero(dz);
  for (Index i = 0; i < n; ++i) m.zbar += pts.mean_weights(i) * outputs[static_cast<std::size_t>(i)];
  m.Psi = Matrix::Zero(g.dim(), dz);
  m.Phi = Matrix::Zero(dz, dz);
  for (Index i = 0; i < n; ++i) {
    const Vector dx = pts.points.col(i) - g.mean();
    const Vector dzi = outputs[static_cast<std::size_t>(i)] - m.zbar;
    m.Psi.noalias() += pts.cov_weights(i) * dx * dzi.transpose();
    m.Phi.noalias() += pts.cov_weights(i) * dzi * dzi.transpose();
  }
  m.Phi = 0.5 * (m.Phi + m.Phi.transpose());
  return m;
}

/// F = J(x̂), b = map(x̂) - F x̂, Ω = 0.
template <typename Map, typename Jac>
AffineMap taylor_linearize(Map&& map, Jac&& jac, const Vector& xhat) {
  AffineMap out;
  out.gain = jac(xhat);
  if (!out.gain.allFinite()) throw NumericalError("taylor_linearize: non-finite Jacobian");
  const Vector value = map(xhat);
  if (!value.allFinite()) throw NumericalError("taylor_linearize: non-finite map value");
  out.offset = value - out.gain * xhat;
  out.error_cov = Matrix::Zero(value.size(), value.size());
  return out;
}

/// Condition number above which a covariance is treated as singular by SLR.
inline constexpr double kMaxSlrCondition = 1e12;

/**
 * Statistical linear regression of `map` with respect to `g`:
 * F = Ψᵀ P⁻¹, b = zbar - F m, Ω = Φ - F P Fᵀ (clipped to PSD).
 */
template <typename Map>
AffineMap slr_linearize(Map&& map, const Gaussian& g, const SigmaScheme& scheme) {
  const Matrix& cov = g.cov();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > kMaxSlrCondition) {
    throw NumericalError("slr_linearize: covariance is singular or ill-conditioned");
  }
  const SigmaPointSet pts = sigma_points(g, scheme);
  const SLRMoments mom = slr_moments(map, g, pts);
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success) throw NumericalError("slr_linearize: Cholesky of covariance failed");
  AffineMap out;
  // P is symmetric, so Ψᵀ P⁻¹ = (P⁻¹ Ψ)ᵀ.
  out.gain = llt.solve(mom.Psi).transpose();
  out.offset = mom.zbar - out.gain * g.mean();
  out.error_cov = symmetrize_psd(mom.Phi - out.gain * cov * out.gain.transpose());
  return out;
}

enum class LinearizationMode { Taylor, Slr };

struct LinearizationConfig {
  LinearizationMode mode = LinearizationMode::Taylor;
  SigmaScheme scheme{};

  static LinearizationConfig taylor() { return {}; }
  static LinearizationConfig slr(SigmaScheme scheme = {}) { return {LinearizationMode::Slr, scheme}; }
};

inline AffineMap linearize_motion(const NonlinearSSM& model, Index k, const Vector& mean, const Matrix& cov,
                                  const LinearizationConfig& cfg) {
  auto f = [&](const Vector& x) { return model.f(k, x); };
  if (cfg.mode == LinearizationMode::Taylor) {
    return taylor_linearize(f, [&](const Vector& x) { return model.f_jacobian(k, x); }, mean);
  }
  return slr_linearize(f, Gaussian(mean, cov), cfg.scheme);
}

inline AffineMap linearize_measurement(const NonlinearSSM& model, Index k, const Vector& mean, const Matrix& cov,
                                       const LinearizationConfig& cfg) {
  const Index dy = model.meas_dim(k);
  const Index dx = model.state_dim();
  if (dy == 0) return {Matrix::Zero(0, dx), Vector::Zero(0), Matrix::Zero(0, 0)};
  auto h = [&](const Vector& x) { return model.h(k, x); };
  if (cfg.mode == LinearizationMode::Taylor) {
    return taylor_linearize(h, [&](const Vector& x) { return model.h_jacobian(k, x); }, mean);
  }
  return slr_linearize(h, Gaussian(mean, cov), cfg.scheme);
}

/**
 * Linearizes every motion and measurement model of `model` around `traj`.
 * Taylor mode reads only the means; SLR mode uses N(mean_k, cov_k).
 */
inline AffineParams linearize_ssm(const NonlinearSSM& model, const TrajectoryEstimate& traj,
                                  const LinearizationConfig& cfg) {
  const Index K = model.horizon();
  if (traj.horizon() != K) throw std::invalid_argument("linearize_ssm: trajectory horizon mismatch");
  const bool taylor = cfg.mode == LinearizationMode::Taylor;
  AffineParams params;
  params.motion.reserve(static_cast<std::size_t>(K - 1));
  params.measurement.reserve(static_cast<std::size_t>(K));
  static const Matrix kUnused;
  for (Index k = 0; k < K; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    const Matrix& cov = taylor ? kUnused : traj.covs[ks];
    if (k + 1 < K) params.motion.push_back(linearize_motion(model, k, traj.means[ks], cov, cfg));
    params.measurement.push_back(linearize_measurement(model, k, traj.means[ks], cov, cfg));
  }
  return params;
}

}  // namespace itersmooth
