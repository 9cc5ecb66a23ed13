#pragma once

/**
 * Core value types shared by the smoothers: Gaussian beliefs,
 * nonlinear additive-noise state-space models, per-timestep affine
 * approximations and trajectory estimates.
 *
 * Time indices are zero-based throughout: the model has states
 * x_0 .. x_{K-1}, transitions f_0 .. f_{K-2} and measurements
 * h_0 .. h_{K-1}.
 */

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

namespace itersmooth {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Raised when a numerical precondition fails (non-finite values, failed
/// factorizations, singular covariances).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

inline void require_square(const Matrix& m, const char* what) {
  if (m.rows() != m.cols()) {
    throw std::invalid_argument(std::string(what) + ": matrix is not square (" +
                                std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")");
  }
}

/// Tolerance below which a negative eigenvalue is treated as round-off and
/// clipped; anything more negative means the input was not a covariance.
inline constexpr double kPsdEigenTolerance = 1e-10;

/**
 * Returns (M + Mᵀ)/2 with negative eigenvalues clipped to zero.
 *
 * Matrices that already admit a Cholesky factor are returned after
 * symmetrization only, since they are positive definite.
 */
inline Matrix symmetrize_psd(const Matrix& m) {
  require_square(m, "symmetrize_psd");
  Matrix sym = 0.5 * (m + m.transpose());
  if (sym.size() == 0) return sym;
  if (!sym.allFinite()) throw NumericalError("symmetrize_psd: non-finite entries");
  Eigen::LLT<Matrix> llt(sym);
  if (llt.info() == Eigen::Success) return sym;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  if (eig.info() != Eigen::Success) throw NumericalError("symmetrize_psd: eigendecomposition failed");
  Vector values = eig.eigenvalues();
  if (values.minCoeff() >= 0.0) return sym;
  values = values.cwiseMax(0.0);
  Matrix clipped = eig.eigenvectors() * values.asDiagonal() * eig.eigenvectors().transpose();
  return 0.5 * (clipped + clipped.transpose());
}

/// Like symmetrize_psd, but rejects matrices whose most negative eigenvalue
/// is below -kPsdEigenTolerance (relative to the matrix scale).
inline Matrix checked_covariance(const Matrix& m, const char* what) {
  require_square(m, what);
  Matrix sym = 0.5 * (m + m.transpose());
  if (sym.size() == 0) return sym;
  if (!sym.allFinite()) throw NumericalError(std::string(what) + ": non-finite covariance");
  Eigen::LLT<Matrix> llt(sym);
  if (llt.info() == Eigen::Success) return sym;
  Eigen::SelfAdjointEigenSolver<Matrix> eig(sym);
  if (eig.info() != Eigen::Success) throw NumericalError(std::string(what) + ": eigendecomposition failed");
  const Vector& values = eig.eigenvalues();
  const double scale = std::max(1.0, values.cwiseAbs().maxCoeff());
  if (values.minCoeff() < -kPsdEigenTolerance * scale) {
    throw NumericalError(std::string(what) + ": covariance has eigenvalue " +
                         std::to_string(values.minCoeff()));
  }
  Matrix clipped = eig.eigenvectors() * values.cwiseMax(0.0).asDiagonal() * eig.eigenvectors().transpose();
  return 0.5 * (clipped + clipped.transpose());
}

/// Cholesky factor of an SPD matrix, or NumericalError.
inline Eigen::LLT<Matrix> cholesky_or_throw(const Matrix& m, const char* what) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) throw NumericalError(std::string(what) + ": Cholesky factorization failed");
  return llt;
}

/**
 * Cholesky factorization with a single jitter retry of
 * 1e-9 * trace(m)/d * I, used by the Kalman recursions.
 */
inline Eigen::LLT<Matrix> cholesky_with_retry(const Matrix& m, const char* what) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() == Eigen::Success) return llt;
  const double d = static_cast<double>(m.rows());
  const double jitter = 1e-9 * std::max(m.trace(), 0.0) / d;
  Matrix bumped = m;
  bumped.diagonal().array() += jitter > 0.0 ? jitter : 1e-9;
  llt.compute(bumped);
  if (llt.info() != Eigen::Success) throw NumericalError(std::string(what) + ": Cholesky failed after jitter retry");
  return llt;
}

/// Multivariate normal belief. The covariance is always symmetric PSD.
class Gaussian {
 public:
  Gaussian() = default;
  Gaussian(Vector mean, const Matrix& cov) : mean_(std::move(mean)), cov_(checked_covariance(cov, "Gaussian")) {
    if (mean_.size() != cov_.rows()) {
      throw std::invalid_argument("Gaussian: mean has dimension " + std::to_string(mean_.size()) +
                                  " but covariance is " + std::to_string(cov_.rows()) + "x" +
                                  std::to_string(cov_.cols()));
    }
    if (!mean_.allFinite()) throw NumericalError("Gaussian: non-finite mean");
  }

  const Vector& mean() const { return mean_; }
  const Matrix& cov() const { return cov_; }
  Index dim() const { return mean_.size(); }

 private:
  Vector mean_;
  Matrix cov_;
};

/// A per-timestep map together with an optional analytic Jacobian.
struct TimeVaryingMap {
  std::function<Vector(Index k, const Vector& x)> value;
  std::function<Matrix(Index k, const Vector& x)> jacobian;  // may be empty
};

/**
 * Central finite-difference Jacobian with per-coordinate step
 * sqrt(eps) * (1 + |x_j|).
 */
template <typename Fn>
Matrix finite_difference_jacobian(Fn&& fn, const Vector& x) {
  const Vector f0 = fn(x);
  Matrix jac(f0.size(), x.size());
  const double root_eps = std::sqrt(std::numeric_limits<double>::epsilon());
  Vector xp = x;
  for (Index j = 0; j < x.size(); ++j) {
    const double h = root_eps * (1.0 + std::abs(x(j)));
    xp(j) = x(j) + h;
    const Vector fp = fn(xp);
    xp(j) = x(j) - h;
    const Vector fm = fn(xp);
    xp(j) = x(j);
    jac.col(j) = (fp - fm) / (2.0 * h);
  }
  return jac;
}

/// Evaluates the analytic Jacobian of `map` at (k, x), or falls back to
/// central finite differences when none is supplied.
inline Matrix evaluate_jacobian(const TimeVaryingMap& map, Index k, const Vector& x) {
  if (map.jacobian) return map.jacobian(k, x);
  return finite_difference_jacobian([&](const Vector& z) { return map.value(k, z); }, x);
}

/// Optional post-processing of measurement residuals y - h(x), e.g. wrapping
/// angle differences into (-pi, pi].
using ResidualAdjuster = std::function<void(Index k, Vector& residual)>;

/**
 * Nonlinear state-space model with additive Gaussian noise:
 *   x_{k+1} = f_k(x_k) + q_k,  q_k ~ N(0, Q_k),   k = 0..K-2
 *   y_k     = h_k(x_k) + r_k,  r_k ~ N(0, R_k),   k = 0..K-1
 *   x_0 ~ prior.
 *
 * The measurement dimension of timestep k is R_k.rows(); zero means no
 * measurement at that timestep.
 */
class NonlinearSSM {
 public:
  NonlinearSSM(Index horizon, Gaussian prior, TimeVaryingMap motion, std::vector<Matrix> motion_noise,
               TimeVaryingMap measurement, std::vector<Matrix> meas_noise, ResidualAdjuster adjust = {})
      : horizon_(horizon),
        prior_(std::move(prior)),
        motion_(std::move(motion)),
        motion_noise_(std::move(motion_noise)),
        measurement_(std::move(measurement)),
        meas_noise_(std::move(meas_noise)),
        adjust_(std::move(adjust)) {
    if (horizon_ < 1) throw std::invalid_argument("NonlinearSSM: horizon must be positive");
    if (!motion_.value) throw std::invalid_argument("NonlinearSSM: motion map is empty");
    if (!measurement_.value) throw std::invalid_argument("NonlinearSSM: measurement map is empty");
    if (static_cast<Index>(motion_noise_.size()) != horizon_ - 1) {
      throw std::invalid_argument("NonlinearSSM: expected " + std::to_string(horizon_ - 1) +
                                  " motion noise covariances, got " + std::to_string(motion_noise_.size()));
    }
    if (static_cast<Index>(meas_noise_.size()) != horizon_) {
      throw std::invalid_argument("NonlinearSSM: expected " + std::to_string(horizon_) +
                                  " measurement noise covariances, got " + std::to_string(meas_noise_.size()));
    }
    const Index dx = state_dim();
    if (Eigen::LLT<Matrix>(prior_.cov()).info() != Eigen::Success) {
      throw std::invalid_argument("NonlinearSSM: prior covariance is not positive definite");
    }
    for (std::size_t k = 0; k < motion_noise_.size(); ++k) {
      auto& q = motion_noise_[k];
      if (q.rows() != dx || q.cols() != dx) throw std::invalid_argument("NonlinearSSM: Q_k has wrong shape");
      q = 0.5 * (q + q.transpose());
      if (Eigen::LLT<Matrix>(q).info() != Eigen::Success) {
        throw std::invalid_argument("NonlinearSSM: Q_" + std::to_string(k) + " is not positive definite");
      }
    }
    for (std::size_t k = 0; k < meas_noise_.size(); ++k) {
      auto& r = meas_noise_[k];
      require_square(r, "NonlinearSSM R_k");
      r = 0.5 * (r + r.transpose());
      if (r.size() > 0 && Eigen::LLT<Matrix>(r).info() != Eigen::Success) {
        throw std::invalid_argument("NonlinearSSM: R_" + std::to_string(k) + " is not positive definite");
      }
    }
  }

  Index horizon() const { return horizon_; }
  Index state_dim() const { return prior_.dim(); }
  Index meas_dim(Index k) const { return meas_noise_[static_cast<std::size_t>(k)].rows(); }
  const Gaussian& prior() const { return prior_; }

  const TimeVaryingMap& motion() const { return motion_; }
  const TimeVaryingMap& measurement() const { return measurement_; }
  const Matrix& motion_noise(Index k) const { return motion_noise_[static_cast<std::size_t>(k)]; }
  const Matrix& meas_noise(Index k) const { return meas_noise_[static_cast<std::size_t>(k)]; }

  Vector f(Index k, const Vector& x) const { return motion_.value(k, x); }
  Vector h(Index k, const Vector& x) const { return measurement_.value(k, x); }
  Matrix f_jacobian(Index k, const Vector& x) const { return evaluate_jacobian(motion_, k, x); }
  Matrix h_jacobian(Index k, const Vector& x) const { return evaluate_jacobian(measurement_, k, x); }

  /// y_k - prediction, passed through the residual adjuster when one is set.
  Vector measurement_residual(Index k, const Vector& y, const Vector& prediction) const {
    Vector r = y - prediction;
    if (adjust_) adjust_(k, r);
    return r;
  }
  const ResidualAdjuster& residual_adjuster() const { return adjust_; }

 private:
  Index horizon_;
  Gaussian prior_;
  TimeVaryingMap motion_;
  std::vector<Matrix> motion_noise_;
  TimeVaryingMap measurement_;
  std::vector<Matrix> meas_noise_;
  ResidualAdjuster adjust_;
};

/// Affine approximation z ≈ gain·x + offset + e, e ~ N(0, error_cov).
struct AffineMap {
  Matrix gain;
  Vector offset;
  Matrix error_cov;
};

/**
 * Per-timestep affine approximation of a model:
 *   x_{k+1} = F_k x_k + b_k + w_k,  w_k ~ N(0, Ω_k)   (K-1 entries)
 *   y_k     = H_k x_k + c_k + g_k,  g_k ~ N(0, Γ_k)   (K entries)
 */
struct AffineParams {
  std::vector<AffineMap> motion;
  std::vector<AffineMap> measurement;

  Index horizon() const { return static_cast<Index>(measurement.size()); }
};

/// Smoothed (or filtered) means and covariances over the horizon.
struct TrajectoryEstimate {
  std::vector<Vector> means;
  std::vector<Matrix> covs;

  Index horizon() const { return static_cast<Index>(means.size()); }

  void validate(Index horizon, Index dim) const {
    if (static_cast<Index>(means.size()) != horizon || static_cast<Index>(covs.size()) != horizon) {
      throw std::invalid_argument("TrajectoryEstimate: expected horizon " + std::to_string(horizon));
    }
    for (std::size_t k = 0; k < means.size(); ++k) {
      if (means[k].size() != dim || covs[k].rows() != dim || covs[k].cols() != dim) {
        throw std::invalid_argument("TrajectoryEstimate: wrong dimension at timestep " + std::to_string(k));
      }
    }
  }

  Gaussian marginal(Index k) const {
    return Gaussian(means[static_cast<std::size_t>(k)], covs[static_cast<std::size_t>(k)]);
  }

  /// The same estimate repeated at every timestep.
  static TrajectoryEstimate constant(Index horizon, const Vector& mean, const Matrix& cov) {
    TrajectoryEstimate t;
    t.means.assign(static_cast<std::size_t>(horizon), mean);
    t.covs.assign(static_cast<std::size_t>(horizon), cov);
    return t;
  }
};

/// Measurements y_0 .. y_{K-1}; an empty vector marks a missing measurement.
using MeasurementSequence = std::vector<Vector>;

inline void validate_measurements(const NonlinearSSM& model, const MeasurementSequence& y) {
  if (static_cast<Index>(y.size()) != model.horizon()) {
    throw std::invalid_argument("measurement sequence has length " + std::to_string(y.size()) +
                                ", model horizon is " + std::to_string(model.horizon()));
  }
  for (Index k = 0; k < model.horizon(); ++k) {
    if (y[static_cast<std::size_t>(k)].size() != model.meas_dim(k)) {
      throw std::invalid_argument("measurement " + std::to_string(k) + " has dimension " +
                                  std::to_string(y[static_cast<std::size_t>(k)].size()) + ", model expects " +
                                  std::to_string(model.meas_dim(k)));
    }
  }
}

/// Stacks a sequence of equally sized vectors into one column.
inline Vector stack(const std::vector<Vector>& parts) {
  Index n = 0;
  for (const auto& p : parts) n += p.size();
  Vector out(n);
  Index offset = 0;
  for (const auto& p : parts) {
    out.segment(offset, p.size()) = p;
    offset += p.size();
  }
  return out;
}

inline std::vector<Vector> unstack(const Vector& stacked, Index horizon, Index dim) {
  if (stacked.size() != horizon * dim) throw std::invalid_argument("unstack: size mismatch");
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(horizon));
  for (Index k = 0; k < horizon; ++k) out.emplace_back(stacked.segment(k * dim, dim));
  return out;
}

}  // namespace itersmooth
