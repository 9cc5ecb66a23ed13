#pragma once

/**
 * Closed-form Kalman filtering and RTS smoothing of affine-Gaussian
 * models, including the linearization-error covariances and the
 * Levenberg–Marquardt pseudo-measurement update.
 */

#include <optional>
#include <stdexcept>
#include <vector>

#include "itersmooth/state_space.hpp"

namespace itersmooth {

enum class CovarianceForm { Standard, Joseph };

/// x ← F x + b + w, w ~ N(0, Q_eff).
inline Gaussian kf_predict(const Gaussian& belief, const Matrix& F, const Vector& b, const Matrix& Q_eff) {
  const Index d = belief.dim();
  if (F.cols() != d || F.rows() != b.size() || Q_eff.rows() != F.rows() || Q_eff.cols() != F.rows()) {
    throw std::invalid_argument("kf_predict: dimension mismatch");
  }
  Vector mean = F * belief.mean() + b;
  Matrix cov = F * belief.cov() * F.transpose() + Q_eff;
  return Gaussian(std::move(mean), 0.5 * (cov + cov.transpose()));
}

/**
 * Kalman update with y = H x + c + v, v ~ N(0, R_eff). An optional
 * residual adjuster post-processes the innovation.
 */
inline Gaussian kf_update(const Gaussian& belief, const Vector& y, const Matrix& H, const Vector& c,
                          const Matrix& R_eff, CovarianceForm form = CovarianceForm::Standard,
                          const std::function<void(Vector&)>& adjust_innovation = {}) {
  const Index d = belief.dim();
  if (H.cols() != d || H.rows() != y.size() || c.size() != y.size() || R_eff.rows() != y.size() ||
      R_eff.cols() != y.size()) {
    throw std::invalid_argument("kf_update: dimension mismatch");
  }
  if (y.size() == 0) return belief;
  const Matrix& P = belief.cov();
  const Matrix PHt = P * H.transpose();
  Matrix S = H * PHt + R_eff;
  S = 0.5 * (S + S.transpose());
  const auto llt = cholesky_with_retry(S, "kf_update innovation covariance");
  const Matrix gain = llt.solve(PHt.transpose()).transpose();
  Vector innovation = y - (H * belief.mean() + c);
  if (adjust_innovation) adjust_innovation(innovation);
  Vector mean = belief.mean() + gain * innovation;
  Matrix cov;
  if (form == CovarianceForm::Joseph) {
    const Matrix IKH = Matrix::Identity(d, d) - gain * H;
    cov = IKH * P * IKH.transpose() + gain * R_eff * gain.transpose();
  } else {
    cov = P - gain * S * gain.transpose();
  }
  return Gaussian(std::move(mean), 0.5 * (cov + cov.transpose()));
}

/**
 * Levenberg–Marquardt regularization as a pseudo-measurement
 * anchor = x + e, e ~ N(0, λ⁻¹ S):
 *   Σ = P + λ⁻¹S,  K = P Σ⁻¹,  m ← m + K (anchor - m),  P ← P - K Σ Kᵀ.
 */
inline Gaussian lm_pseudo_update(const Gaussian& belief, const Vector& anchor, double lambda, const Matrix& S) {
  if (!(lambda > 0.0)) throw std::invalid_argument("lm_pseudo_update: lambda must be positive");
  if (anchor.size() != belief.dim() || S.rows() != belief.dim() || S.cols() != belief.dim()) {
    throw std::invalid_argument("lm_pseudo_update: dimension mismatch");
  }
  const Matrix& P = belief.cov();
  Matrix sigma = P + S / lambda;
  sigma = 0.5 * (sigma + sigma.transpose());
  const auto llt = cholesky_with_retry(sigma, "lm_pseudo_update");
  const Matrix gain = llt.solve(P).transpose();
  Vector mean = belief.mean() + gain * (anchor - belief.mean());
  Matrix cov = P - gain * sigma * gain.transpose();
  return Gaussian(std::move(mean), 0.5 * (cov + cov.transpose()));
}

/// Predicted and updated beliefs of one forward pass.
struct FilterCache {
  std::vector<Gaussian> predicted;
  std::vector<Gaussian> updated;

  Index horizon() const { return static_cast<Index>(updated.size()); }
};

/// RTS backward pass over a forward-pass cache; `params` supplies F_k.
inline TrajectoryEstimate rts_backward(const FilterCache& cache, const AffineParams& params) {
  const Index K = cache.horizon();
  if (K < 1 || static_cast<Index>(cache.predicted.size()) != K) {
    throw std::invalid_argument("rts_backward: malformed filter cache");
  }
  if (static_cast<Index>(params.motion.size()) != K - 1) {
    throw std::invalid_argument("rts_backward: motion parameter count mismatch");
  }
  TrajectoryEstimate out;
  out.means.resize(static_cast<std::size_t>(K));
  out.covs.resize(static_cast<std::size_t>(K));
  const auto last = static_cast<std::size_t>(K - 1);
  out.means[last] = cache.updated[last].mean();
  out.covs[last] = cache.updated[last].cov();
  for (Index k = K - 2; k >= 0; --k) {
    const auto ks = static_cast<std::size_t>(k);
    const Gaussian& filt = cache.updated[ks];
    const Gaussian& pred = cache.predicted[ks + 1];
    const Matrix cross = filt.cov() * params.motion[ks].gain.transpose();
    const auto llt = cholesky_with_retry(pred.cov(), "rts_backward predicted covariance");
    const Matrix G = llt.solve(cross.transpose()).transpose();
    out.means[ks] = filt.mean() + G * (out.means[ks + 1] - pred.mean());
    Matrix cov = filt.cov() + G * (out.covs[ks + 1] - pred.cov()) * G.transpose();
    out.covs[ks] = symmetrize_psd(cov);
    if (!out.means[ks].allFinite()) throw NumericalError("rts_backward: non-finite smoothed mean");
  }
  return out;
}

/// LM pseudo-measurement settings: strength λ, scalings S_k and the anchor
/// trajectory (the current iterate).
struct LMRegularization {
  double lambda = 0.0;
  const std::vector<Matrix>* scaling = nullptr;  // S_k, one per timestep
  const std::vector<Vector>* anchor = nullptr;
};

struct AffineSmoothOptions {
  CovarianceForm form = CovarianceForm::Standard;
};

/// Forward Kalman pass of the affine model `params` (with Q+Ω, R+Γ).
inline FilterCache affine_filter(const NonlinearSSM& model, const AffineParams& params, const MeasurementSequence& y,
                                 const std::optional<LMRegularization>& lm = std::nullopt,
                                 const AffineSmoothOptions& opts = {}) {
  const Index K = model.horizon();
  if (params.horizon() != K || static_cast<Index>(params.motion.size()) != K - 1) {
    throw std::invalid_argument("affine_smooth: parameter horizon mismatch");
  }
  if (static_cast<Index>(y.size()) != K) throw std::invalid_argument("affine_smooth: measurement horizon mismatch");
  const bool regularize = lm && lm->lambda > 0.0;
  if (regularize && (!lm->scaling || !lm->anchor || static_cast<Index>(lm->scaling->size()) != K ||
                     static_cast<Index>(lm->anchor->size()) != K)) {
    throw std::invalid_argument("affine_smooth: LM scaling/anchor must cover the horizon");
  }
  FilterCache cache;
  cache.predicted.reserve(static_cast<std::size_t>(K));
  cache.updated.reserve(static_cast<std::size_t>(K));
  for (Index k = 0; k < K; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    if (k == 0) {
      cache.predicted.push_back(model.prior());
    } else {
      const AffineMap& mm = params.motion[ks - 1];
      cache.predicted.push_back(
          kf_predict(cache.updated.back(), mm.gain, mm.offset, model.motion_noise(k - 1) + mm.error_cov));
    }
    Gaussian upd = cache.predicted.back();
    if (model.meas_dim(k) > 0) {
      const AffineMap& hm = params.measurement[ks];
      std::function<void(Vector&)> adjust;
      if (model.residual_adjuster()) adjust = [&](Vector& r) { model.residual_adjuster()(k, r); };
      upd = kf_update(upd, y[ks], hm.gain, hm.offset, model.meas_noise(k) + hm.error_cov, opts.form, adjust);
    }
    if (regularize) upd = lm_pseudo_update(upd, (*lm->anchor)[ks], lm->lambda, (*lm->scaling)[ks]);
    cache.updated.push_back(std::move(upd));
  }
  return cache;
}

/// Forward filter followed by the RTS backward pass.
inline TrajectoryEstimate affine_smooth(const NonlinearSSM& model, const AffineParams& params,
                                        const MeasurementSequence& y,
                                        const std::optional<LMRegularization>& lm = std::nullopt,
                                        const AffineSmoothOptions& opts = {}) {
  return rts_backward(affine_filter(model, params, y, lm, opts), params);
}

}  // namespace itersmooth
