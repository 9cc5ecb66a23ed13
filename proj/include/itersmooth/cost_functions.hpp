#pragma once

/**
 * Nonlinear least-squares objectives minimized by the iterated
 * smoothers.
 *
 * ieks_cost is the negative log-posterior (up to a constant) of the
 * nonlinear model. ipls_cost replaces f_k and h_k by their sigma-point
 * expectations under N(x_k, P̂_k) and inflates the noise by the SLR error
 * covariances, all frozen from one outer iteration.
 */

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "itersmooth/linearization.hpp"
#include "itersmooth/state_space.hpp"

namespace itersmooth {

using MeanSequence = std::vector<Vector>;
using CostFunction = std::function<double(const MeanSequence&)>;

namespace detail {

inline double weighted_square(const Eigen::LLT<Matrix>& llt, const Vector& r) {
  if (r.size() == 0) return 0.0;
  const Vector w = llt.matrixL().solve(r);
  return w.squaredNorm();
}

inline void check_means(const NonlinearSSM& model, const MeanSequence& means) {
  if (static_cast<Index>(means.size()) != model.horizon()) {
    throw std::invalid_argument("cost: mean sequence length does not match the horizon");
  }
}

inline double finite_or_throw(double v) {
  if (!std::isfinite(v)) throw NumericalError("cost: non-finite value");
  return v;
}

}  // namespace detail

/// Cholesky factors of P̂_{1|0}, Q_k and R_k, computed once per model.
class ModelWeights {
 public:
  explicit ModelWeights(const NonlinearSSM& model) : prior_(cholesky_or_throw(model.prior().cov(), "prior")) {
    for (Index k = 0; k + 1 < model.horizon(); ++k) motion_.push_back(cholesky_or_throw(model.motion_noise(k), "Q"));
    for (Index k = 0; k < model.horizon(); ++k) {
      meas_.push_back(model.meas_dim(k) > 0 ? cholesky_or_throw(model.meas_noise(k), "R") : Eigen::LLT<Matrix>());
    }
  }
  const Eigen::LLT<Matrix>& prior() const { return prior_; }
  const Eigen::LLT<Matrix>& motion(Index k) const { return motion_[static_cast<std::size_t>(k)]; }
  const Eigen::LLT<Matrix>& meas(Index k) const { return meas_[static_cast<std::size_t>(k)]; }

 private:
  Eigen::LLT<Matrix> prior_;
  std::vector<Eigen::LLT<Matrix>> motion_;
  std::vector<Eigen::LLT<Matrix>> meas_;
};

/// ½ of the prior, dynamics and measurement Mahalanobis terms.
inline double ieks_cost(const MeanSequence& means, const NonlinearSSM& model, const MeasurementSequence& y,
                        const ModelWeights& weights) {
  detail::check_means(model, means);
  const Index K = model.horizon();
  double total = detail::weighted_square(weights.prior(), means[0] - model.prior().mean());
  for (Index k = 0; k < K; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    if (model.meas_dim(k) > 0) {
      total += detail::weighted_square(weights.meas(k), model.measurement_residual(k, y[ks], model.h(k, means[ks])));
    }
    if (k + 1 < K) total += detail::weighted_square(weights.motion(k), means[ks + 1] - model.f(k, means[ks]));
  }
  return detail::finite_or_throw(0.5 * total);
}

inline double ieks_cost(const MeanSequence& means, const NonlinearSSM& model, const MeasurementSequence& y) {
  return ieks_cost(means, model, y, ModelWeights(model));
}

/**
 * Frozen quantities of one IPLS outer iteration: covariances P̂_k defining
 * the expectations, and the SLR error covariances Ω_k, Γ_k.
 */
class IplsCostContext {
 public:
  IplsCostContext(const NonlinearSSM& model, std::vector<Matrix> covs, std::vector<Matrix> omega,
                  std::vector<Matrix> gamma, SigmaScheme scheme = {})
      : covs_(std::move(covs)), omega_(std::move(omega)), gamma_(std::move(gamma)), scheme_(scheme) {
    const Index K = model.horizon();
    const Index dx = model.state_dim();
    if (static_cast<Index>(covs_.size()) != K || static_cast<Index>(omega_.size()) != K - 1 ||
        static_cast<Index>(gamma_.size()) != K) {
      throw std::invalid_argument("IplsCostContext: sequence lengths do not match the horizon");
    }
    const SigmaPointSet unit = unit_sigma_points(dx, scheme_);
    weights_ = unit.mean_weights;
    for (Index k = 0; k < K; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      covs_[ks] = checked_covariance(covs_[ks], "IplsCostContext covariance");
      offsets_.push_back(detail::sigma_factor(covs_[ks]) * unit.points);
      if (k + 1 < K) {
        omega_[ks] = checked_covariance(omega_[ks], "IplsCostContext Omega");
        motion_.push_back(cholesky_or_throw(model.motion_noise(k) + omega_[ks], "Q + Omega"));
      }
      gamma_[ks] = checked_covariance(gamma_[ks], "IplsCostContext Gamma");
      if (gamma_[ks].rows() != model.meas_dim(k)) throw std::invalid_argument("IplsCostContext: Gamma shape");
      meas_.push_back(model.meas_dim(k) > 0 ? cholesky_or_throw(model.meas_noise(k) + gamma_[ks], "R + Gamma")
                                            : Eigen::LLT<Matrix>());
    }
  }

  /// Freezes covariances from `traj` and Ω, Γ from `params`.
  static IplsCostContext from_linearization(const NonlinearSSM& model, const TrajectoryEstimate& traj,
                                            const AffineParams& params, SigmaScheme scheme = {}) {
    std::vector<Matrix> omega, gamma;
    for (const auto& m : params.motion) omega.push_back(m.error_cov);
    for (const auto& m : params.measurement) gamma.push_back(m.error_cov);
    return IplsCostContext(model, traj.covs, std::move(omega), std::move(gamma), scheme);
  }

  /// x̄_k(x) = E[f_k(z)], z ~ N(x, P̂_k), by sigma points.
  Vector state_bar(const NonlinearSSM& model, Index k, const Vector& x) const {
    return expectation([&](const Vector& z) { return model.f(k, z); }, k, x);
  }
  /// ȳ_k(x) = E[h_k(z)], z ~ N(x, P̂_k), by sigma points.
  Vector meas_bar(const NonlinearSSM& model, Index k, const Vector& x) const {
    return expectation([&](const Vector& z) { return model.h(k, z); }, k, x);
  }

  const std::vector<Matrix>& covs() const { return covs_; }
  const std::vector<Matrix>& omega() const { return omega_; }
  const std::vector<Matrix>& gamma() const { return gamma_; }
  const SigmaScheme& scheme() const { return scheme_; }
  const Eigen::LLT<Matrix>& motion_weight(Index k) const { return motion_[static_cast<std::size_t>(k)]; }
  const Eigen::LLT<Matrix>& meas_weight(Index k) const { return meas_[static_cast<std::size_t>(k)]; }

 private:
  template <typename Map>
  Vector expectation(Map&& map, Index k, const Vector& x) const {
    const Matrix& off = offsets_[static_cast<std::size_t>(k)];
    Vector acc = weights_(0) * map(Vector(x + off.col(0)));
    for (Index i = 1; i < off.cols(); ++i) acc += weights_(i) * map(Vector(x + off.col(i)));
    return acc;
  }

  std::vector<Matrix> covs_;
  std::vector<Matrix> omega_;
  std::vector<Matrix> gamma_;
  SigmaScheme scheme_;
  Vector weights_;
  std::vector<Matrix> offsets_;
  std::vector<Eigen::LLT<Matrix>> motion_;
  std::vector<Eigen::LLT<Matrix>> meas_;
};

/// Cost of the current IPLS iteration at `means`; the SLR expectations are
/// re-evaluated at every call while P̂, Ω, Γ stay frozen.
inline double ipls_cost(const MeanSequence& means, const NonlinearSSM& model, const MeasurementSequence& y,
                        const IplsCostContext& ctx, const ModelWeights& weights) {
  detail::check_means(model, means);
  const Index K = model.horizon();
  double total = detail::weighted_square(weights.prior(), means[0] - model.prior().mean());
  for (Index k = 0; k < K; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    if (model.meas_dim(k) > 0) {
      total += detail::weighted_square(ctx.meas_weight(k),
                                       model.measurement_residual(k, y[ks], ctx.meas_bar(model, k, means[ks])));
    }
    if (k + 1 < K) {
      total += detail::weighted_square(ctx.motion_weight(k), means[ks + 1] - ctx.state_bar(model, k, means[ks]));
    }
  }
  return detail::finite_or_throw(0.5 * total);
}

inline double ipls_cost(const MeanSequence& means, const NonlinearSSM& model, const MeasurementSequence& y,
                        const IplsCostContext& ctx) {
  return ipls_cost(means, model, y, ctx, ModelWeights(model));
}

/// base(means) + ½ λ Σ_k (x_k - anchor_k)ᵀ S_k⁻¹ (x_k - anchor_k).
inline double lm_cost(const CostFunction& base, const MeanSequence& means, const MeanSequence& anchor, double lambda,
                      const std::vector<Matrix>& scaling) {
  if (lambda < 0.0) throw std::invalid_argument("lm_cost: lambda must be nonnegative");
  const double b = base(means);
  if (lambda == 0.0) return b;
  if (anchor.size() != means.size() || scaling.size() != means.size()) {
    throw std::invalid_argument("lm_cost: anchor/scaling length mismatch");
  }
  double penalty = 0.0;
  for (std::size_t k = 0; k < means.size(); ++k) {
    const Vector diff = means[k] - anchor[k];
    penalty += diff.dot(scaling[k].llt().solve(diff));
  }
  return b + 0.5 * lambda * penalty;
}

/**
 * Negative log-posterior (up to a constant) of the affine model `params`:
 * the quadratic that one smoothing pass minimizes exactly.
 */
inline double affine_cost(const MeanSequence& means, const NonlinearSSM& model, const AffineParams& params,
                          const MeasurementSequence& y) {
  detail::check_means(model, means);
  const Index K = model.horizon();
  double total = detail::weighted_square(cholesky_or_throw(model.prior().cov(), "prior"),
                                         means[0] - model.prior().mean());
  for (Index k = 0; k < K; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    if (model.meas_dim(k) > 0) {
      const AffineMap& hm = params.measurement[ks];
      const Vector r = model.measurement_residual(k, y[ks], hm.gain * means[ks] + hm.offset);
      total += detail::weighted_square(cholesky_or_throw(model.meas_noise(k) + hm.error_cov, "R + Gamma"), r);
    }
    if (k + 1 < K) {
      const AffineMap& fm = params.motion[ks];
      const Vector r = means[ks + 1] - (fm.gain * means[ks] + fm.offset);
      total += detail::weighted_square(cholesky_or_throw(model.motion_noise(k) + fm.error_cov, "Q + Omega"), r);
    }
  }
  return detail::finite_or_throw(0.5 * total);
}

}  // namespace itersmooth
