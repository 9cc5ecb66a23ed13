#pragma once

/**
 * Iterated Gaussian smoothers: plain IEKS / IPLS (Gauss–Newton),
 * Levenberg–Marquardt regularized LM-IEKS / LM-IPLS and line-search
 * LS-IEKS / LS-IPLS.
 *
 * Every driver alternates between linearizing the model around the current
 * estimate and smoothing the resulting affine model in closed form. The
 * safeguarded variants evaluate a cost that is frozen for one outer
 * iteration: ieks_cost for Taylor linearization, ipls_cost with P̂, Ω, Γ
 * held fixed for SLR.
 */

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "itersmooth/affine_smoother.hpp"
#include "itersmooth/cost_functions.hpp"
#include "itersmooth/linearization.hpp"
#include "itersmooth/state_space.hpp"

namespace itersmooth {

enum class Safeguard { None, LevenbergMarquardt, LineSearch };
enum class LineSearchKind { Grid, Armijo };

struct LineSearchConfig {
  LineSearchKind kind = LineSearchKind::Grid;
  int grid_points = 10;
  double armijo_c1 = 1e-4;
  double armijo_shrink = 0.5;
  int armijo_max_backtracks = 20;
};

/// Levenberg–Marquardt damping state. λ is kept as λ₀·ν^exponent so that
/// the adaptation is exact: each rejection adds one to the exponent, each
/// acceptance subtracts one.
struct LMState {
  double lambda0 = 1e-2;
  int exponent = 0;
  double nu = 10.0;
  double lambda_max = 1e10;
  std::vector<Matrix> scaling;  // S_k

  double lambda() const { return lambda0 * std::pow(nu, exponent); }
  void increase() { ++exponent; }
  void decrease() { --exponent; }

  void validate(Index horizon, Index dim) const {
    if (!(lambda0 >= 0.0)) throw std::invalid_argument("LMState: lambda must be nonnegative");
    if (!(nu > 1.0)) throw std::invalid_argument("LMState: nu must exceed 1");
    if (static_cast<Index>(scaling.size()) != horizon) throw std::invalid_argument("LMState: need one S_k per timestep");
    for (const auto& s : scaling) {
      if (s.rows() != dim || s.cols() != dim || Eigen::LLT<Matrix>(s).info() != Eigen::Success) {
        throw std::invalid_argument("LMState: S_k must be symmetric positive definite");
      }
    }
  }
};

struct SmootherConfig {
  LinearizationMode linearization = LinearizationMode::Taylor;
  Safeguard safeguard = Safeguard::None;
  SigmaScheme scheme{};
  int max_iterations = 10;
  double tolerance = 1e-6;
  int inner_iterations = 1;
  LineSearchConfig line_search{};
  double lambda0 = 1e-2;
  double nu = 10.0;
  double lambda_max = 1e10;
  std::vector<Matrix> scaling;  // empty means S_k = I
  CovarianceForm covariance_form = CovarianceForm::Standard;
  bool record_iterates = false;

  LinearizationConfig linearization_config() const { return {linearization, scheme}; }

  std::string name() const {
    const std::string base = linearization == LinearizationMode::Taylor ? "IEKS" : "IPLS";
    switch (safeguard) {
      case Safeguard::LevenbergMarquardt: return "LM-" + base;
      case Safeguard::LineSearch: return "LS-" + base;
      default: return base;
    }
  }

  void validate() const {
    if (max_iterations < 1) throw std::invalid_argument("SmootherConfig: max_iterations must be at least 1");
    if (!(tolerance > 0.0)) throw std::invalid_argument("SmootherConfig: tolerance must be positive");
    if (inner_iterations < 1) throw std::invalid_argument("SmootherConfig: inner_iterations must be at least 1");
    if (line_search.grid_points < 1) throw std::invalid_argument("SmootherConfig: grid_points must be at least 1");
    if (!(line_search.armijo_shrink > 0.0 && line_search.armijo_shrink < 1.0)) {
      throw std::invalid_argument("SmootherConfig: armijo_shrink must lie in (0, 1)");
    }
    if (!(lambda0 >= 0.0)) throw std::invalid_argument("SmootherConfig: lambda0 must be nonnegative");
    if (!(nu > 1.0)) throw std::invalid_argument("SmootherConfig: nu must exceed 1");
  }

  /// Parses "IEKS", "IPLS", "LM-IEKS", "LM-IPLS", "LS-IEKS", "LS-IPLS".
  static SmootherConfig from_name(const std::string& name) {
    SmootherConfig cfg;
    std::string base = name;
    if (name.rfind("LM-", 0) == 0) {
      cfg.safeguard = Safeguard::LevenbergMarquardt;
      base = name.substr(3);
    } else if (name.rfind("LS-", 0) == 0) {
      cfg.safeguard = Safeguard::LineSearch;
      base = name.substr(3);
    }
    if (base == "IEKS") {
      cfg.linearization = LinearizationMode::Taylor;
    } else if (base == "IPLS") {
      cfg.linearization = LinearizationMode::Slr;
    } else {
      throw std::invalid_argument("unknown smoother variant '" + name + "'");
    }
    return cfg;
  }
};

inline const std::vector<std::string>& smoother_variants() {
  static const std::vector<std::string> names{"IEKS", "IPLS", "LM-IEKS", "LM-IPLS", "LS-IEKS", "LS-IPLS"};
  return names;
}

/// One outer (accepted) iteration of a driver.
struct IterationRecord {
  int iteration = 0;
  double cost_before = std::numeric_limits<double>::quiet_NaN();  // frozen cost at the previous iterate
  double cost = std::numeric_limits<double>::quiet_NaN();         // frozen cost at the new iterate
  double lambda = std::numeric_limits<double>::quiet_NaN();       // λ used by the accepted proposal
  double lambda_after = std::numeric_limits<double>::quiet_NaN();
  int exponent_before = 0;  // λ exponent on entry to the iteration
  int exponent_after = 0;
  double alpha = std::numeric_limits<double>::quiet_NaN();
  int rejections = 0;
  double mean_change = std::numeric_limits<double>::quiet_NaN();
  int cost_epoch = 0;  // increments whenever the frozen cost is rebuilt
};

enum class RunStatus { MaxIterations, Converged, Failed };

struct IterationTrace {
  std::vector<IterationRecord> records;
  RunStatus status = RunStatus::MaxIterations;
  std::string failure;
  std::vector<TrajectoryEstimate> iterates;  // iterates[0] is the initial estimate, when recorded

  bool failed() const { return status == RunStatus::Failed; }
};

struct SmootherResult {
  TrajectoryEstimate estimate;
  IterationTrace trace;
};

/// max_k ‖a_k - b_k‖ / (1 + ‖b_k‖).
inline double relative_mean_change(const MeanSequence& next, const MeanSequence& prev) {
  double worst = 0.0;
  for (std::size_t k = 0; k < next.size(); ++k) {
    const double change = (next[k] - prev[k]).norm() / (1.0 + prev[k].norm());
    if (!std::isfinite(change)) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, change);
  }
  return worst;
}

/// One Gauss–Newton step: linearize around `traj` and smooth the result.
inline TrajectoryEstimate gn_iteration(const NonlinearSSM& model, const TrajectoryEstimate& traj,
                                       const MeasurementSequence& y, const LinearizationConfig& lin,
                                       const AffineSmoothOptions& opts = {}) {
  return affine_smooth(model, linearize_ssm(model, traj, lin), y, std::nullopt, opts);
}

/**
 * The non-iterative smoother of a linearization family: EKS for Taylor,
 * the sigma-point (prior linearization) RTS smoother for SLR. Motion is
 * linearized around the filtered belief, measurement around the predicted.
 */
inline TrajectoryEstimate non_iterative_smoother(const NonlinearSSM& model, const MeasurementSequence& y,
                                                 const LinearizationConfig& lin,
                                                 const AffineSmoothOptions& opts = {}) {
  validate_measurements(model, y);
  const Index K = model.horizon();
  AffineParams params;
  FilterCache cache;
  for (Index k = 0; k < K; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    if (k == 0) {
      cache.predicted.push_back(model.prior());
    } else {
      const Gaussian& filt = cache.updated.back();
      params.motion.push_back(linearize_motion(model, k - 1, filt.mean(), filt.cov(), lin));
      const AffineMap& mm = params.motion.back();
      cache.predicted.push_back(kf_predict(filt, mm.gain, mm.offset, model.motion_noise(k - 1) + mm.error_cov));
    }
    const Gaussian& pred = cache.predicted.back();
    params.measurement.push_back(linearize_measurement(model, k, pred.mean(), pred.cov(), lin));
    Gaussian upd = pred;
    if (model.meas_dim(k) > 0) {
      const AffineMap& hm = params.measurement.back();
      std::function<void(Vector&)> adjust;
      if (model.residual_adjuster()) adjust = [&](Vector& r) { model.residual_adjuster()(k, r); };
      upd = kf_update(pred, y[ks], hm.gain, hm.offset, model.meas_noise(k) + hm.error_cov, opts.form, adjust);
    }
    cache.updated.push_back(std::move(upd));
  }
  return rts_backward(cache, params);
}

/// Cost frozen for one outer iteration, plus the linearization it came from.
struct FrozenObjective {
  CostFunction cost;
  AffineParams params;  // linearization at the freezing point
  std::optional<IplsCostContext> context;
};

inline FrozenObjective freeze_objective(const NonlinearSSM& model, const MeasurementSequence& y,
                                        const TrajectoryEstimate& traj, const SmootherConfig& cfg,
                                        const std::shared_ptr<const ModelWeights>& weights) {
  FrozenObjective out;
  out.params = linearize_ssm(model, traj, cfg.linearization_config());
  if (cfg.linearization == LinearizationMode::Taylor) {
    out.cost = [&model, &y, weights](const MeanSequence& m) { return ieks_cost(m, model, y, *weights); };
  } else {
    out.context.emplace(IplsCostContext::from_linearization(model, traj, out.params, cfg.scheme));
    auto ctx = std::make_shared<const IplsCostContext>(*out.context);
    out.cost = [&model, &y, weights, ctx](const MeanSequence& m) { return ipls_cost(m, model, y, *ctx, *weights); };
  }
  return out;
}

/// Re-linearizes around (means, frozen covs) while keeping the frozen
/// error covariances Ω, Γ; used by inner iterations after the first.
inline AffineParams relinearize_with_frozen_errors(const NonlinearSSM& model, const TrajectoryEstimate& traj,
                                                   const FrozenObjective& frozen, const SmootherConfig& cfg) {
  AffineParams params = linearize_ssm(model, traj, cfg.linearization_config());
  for (std::size_t k = 0; k < params.motion.size(); ++k) params.motion[k].error_cov = frozen.params.motion[k].error_cov;
  for (std::size_t k = 0; k < params.measurement.size(); ++k) {
    params.measurement[k].error_cov = frozen.params.measurement[k].error_cov;
  }
  return params;
}

inline double safe_cost(const CostFunction& cost, const MeanSequence& means) {
  try {
    return cost(means);
  } catch (const NumericalError&) {
    return std::numeric_limits<double>::infinity();
  }
}

/// Smoothing pass of `params` with the LM pseudo-measurement anchored at
/// `anchor` (plain smoothing when λ = 0).
inline TrajectoryEstimate lm_proposal(const NonlinearSSM& model, const AffineParams& params,
                                      const MeasurementSequence& y, const MeanSequence& anchor, double lambda,
                                      const std::vector<Matrix>& scaling, const AffineSmoothOptions& opts = {}) {
  LMRegularization reg{lambda, &scaling, &anchor};
  return affine_smooth(model, params, y, reg, opts);
}

enum class LMOutcome { Accepted, Stalled, Failed };

struct LMInnerResult {
  TrajectoryEstimate estimate;  // accepted proposal, or the entry trajectory
  LMState state;
  LMOutcome outcome = LMOutcome::Failed;
  int rejections = 0;
  double lambda_used = 0.0;  // λ of the accepted proposal
  double cost_before = 0.0;
  double cost_after = 0.0;
  double mean_change = 0.0;
  std::string message;
};

/**
 * One LM iteration with fixed linearization `params`: propose, accept if
 * the regularized cost drops below the entry cost (λ ← λ/ν), otherwise
 * λ ← νλ and retry. A proposal whose relative change is below `tolerance`
 * ends the loop as Stalled, leaving λ unchanged.
 */
inline LMInnerResult lm_inner_iteration(const NonlinearSSM& model, const TrajectoryEstimate& traj,
                                        const MeasurementSequence& y, const AffineParams& params, LMState lm,
                                        const CostFunction& cost, double tolerance,
                                        const AffineSmoothOptions& opts = {}) {
  LMInnerResult res;
  res.estimate = traj;
  res.cost_before = cost(traj.means);
  if (!std::isfinite(res.cost_before)) throw NumericalError("lm_inner_iteration: entry cost is not finite");
  res.cost_after = res.cost_before;
  const MeanSequence& anchor = traj.means;
  while (true) {
    const double lambda = lm.lambda();
    std::optional<TrajectoryEstimate> proposal;
    try {
      proposal = lm_proposal(model, params, y, anchor, lambda, lm.scaling, opts);
    } catch (const NumericalError&) {
      proposal.reset();
    }
    double candidate = std::numeric_limits<double>::infinity();
    if (proposal) {
      const double change = relative_mean_change(proposal->means, anchor);
      if (change < tolerance) {
        res.outcome = LMOutcome::Stalled;
        res.mean_change = change;
        res.lambda_used = lambda;
        res.state = lm;
        return res;
      }
      candidate = safe_cost([&](const MeanSequence& m) { return lm_cost(cost, m, anchor, lambda, lm.scaling); },
                            proposal->means);
    }
    if (candidate < res.cost_before) {
      res.lambda_used = lambda;
      lm.decrease();
      res.outcome = LMOutcome::Accepted;
      res.mean_change = relative_mean_change(proposal->means, anchor);
      res.cost_after = cost(proposal->means);
      res.estimate = std::move(*proposal);
      res.state = lm;
      return res;
    }
    ++res.rejections;
    if (lambda == 0.0) {
      res.outcome = LMOutcome::Failed;
      res.message = "no cost decrease with lambda = 0";
      res.state = lm;
      return res;
    }
    lm.increase();
    if (lm.lambda() > lm.lambda_max) {
      res.outcome = LMOutcome::Failed;
      res.message = "lambda exceeded lambda_max without a cost decrease";
      res.state = lm;
      return res;
    }
  }
}

namespace detail {

inline LMState initial_lm_state(const NonlinearSSM& model, const SmootherConfig& cfg) {
  LMState lm;
  lm.lambda0 = cfg.lambda0;
  lm.nu = cfg.nu;
  lm.lambda_max = cfg.lambda_max;
  lm.scaling = cfg.scaling.empty() ? std::vector<Matrix>(static_cast<std::size_t>(model.horizon()),
                                                         Matrix::Identity(model.state_dim(), model.state_dim()))
                                   : cfg.scaling;
  lm.validate(model.horizon(), model.state_dim());
  return lm;
}

inline void check_inputs(const NonlinearSSM& model, const MeasurementSequence& y, const TrajectoryEstimate& init,
                         const SmootherConfig& cfg) {
  cfg.validate();
  validate_measurements(model, y);
  init.validate(model.horizon(), model.state_dim());
}

}  // namespace detail

/// Plain iterated smoother (IEKS or IPLS): repeated Gauss–Newton steps
/// without safeguards.
inline SmootherResult plain_smoother(const NonlinearSSM& model, const MeasurementSequence& y,
                                     const TrajectoryEstimate& init, const SmootherConfig& cfg) {
  detail::check_inputs(model, y, init, cfg);
  if (cfg.safeguard != Safeguard::None) throw std::invalid_argument("plain_smoother: variant must be IEKS or IPLS");
  const auto weights = std::make_shared<const ModelWeights>(model);
  const AffineSmoothOptions opts{cfg.covariance_form};
  SmootherResult out;
  out.estimate = init;
  if (cfg.record_iterates) out.trace.iterates.push_back(init);
  for (int it = 1; it <= cfg.max_iterations; ++it) {
    try {
      FrozenObjective frozen = freeze_objective(model, y, out.estimate, cfg, weights);
      IterationRecord rec;
      rec.iteration = it;
      rec.cost_epoch = it;
      rec.cost_before = safe_cost(frozen.cost, out.estimate.means);
      TrajectoryEstimate next = affine_smooth(model, frozen.params, y, std::nullopt, opts);
      rec.cost = safe_cost(frozen.cost, next.means);
      rec.alpha = 1.0;
      rec.mean_change = relative_mean_change(next.means, out.estimate.means);
      out.estimate = std::move(next);
      out.trace.records.push_back(rec);
      if (cfg.record_iterates) out.trace.iterates.push_back(out.estimate);
      if (rec.mean_change < cfg.tolerance) {
        out.trace.status = RunStatus::Converged;
        return out;
      }
    } catch (const NumericalError& e) {
      out.trace.status = RunStatus::Failed;
      out.trace.failure = e.what();
      return out;
    }
  }
  out.trace.status = RunStatus::MaxIterations;
  return out;
}

/// LM-IEKS / LM-IPLS. Each outer iteration freezes the cost (and, for
/// SLR, Ω, Γ and P̂); inner iterations move only the means.
inline SmootherResult lm_smoother(const NonlinearSSM& model, const MeasurementSequence& y,
                                  const TrajectoryEstimate& init, const SmootherConfig& cfg) {
  detail::check_inputs(model, y, init, cfg);
  if (cfg.safeguard != Safeguard::LevenbergMarquardt) {
    throw std::invalid_argument("lm_smoother: variant must be LM-IEKS or LM-IPLS");
  }
  const auto weights = std::make_shared<const ModelWeights>(model);
  const AffineSmoothOptions opts{cfg.covariance_form};
  LMState lm = detail::initial_lm_state(model, cfg);
  SmootherResult out;
  out.estimate = init;
  if (cfg.record_iterates) out.trace.iterates.push_back(init);
  TrajectoryEstimate current = init;  // means move, covs stay frozen within an outer iteration
  int iteration = 0;
  int epoch = 0;
  try {
    while (iteration < cfg.max_iterations) {
      ++epoch;
      const FrozenObjective frozen = freeze_objective(model, y, current, cfg, weights);
      std::vector<Matrix> latest_covs = current.covs;
      bool stop = false;
      for (int inner = 0; inner < cfg.inner_iterations && iteration < cfg.max_iterations; ++inner) {
        const AffineParams params =
            inner == 0 ? frozen.params : relinearize_with_frozen_errors(model, current, frozen, cfg);
        const int exponent_before = lm.exponent;
        LMInnerResult res = lm_inner_iteration(model, current, y, params, lm, frozen.cost, cfg.tolerance, opts);
        lm = res.state;
        if (res.outcome != LMOutcome::Accepted) {
          if (res.outcome == LMOutcome::Stalled) {
            out.trace.status = RunStatus::Converged;
          } else {
            out.trace.status = RunStatus::Failed;
            out.trace.failure = res.message;
          }
          stop = true;
          break;
        }
        ++iteration;
        IterationRecord rec;
        rec.iteration = iteration;
        rec.cost_epoch = epoch;
        rec.cost_before = res.cost_before;
        rec.cost = res.cost_after;
        rec.lambda = res.lambda_used;
        rec.lambda_after = lm.lambda();
        rec.exponent_before = exponent_before;
        rec.exponent_after = lm.exponent;
        rec.rejections = res.rejections;
        rec.mean_change = res.mean_change;
        out.trace.records.push_back(rec);
        current.means = res.estimate.means;
        latest_covs = res.estimate.covs;
        out.estimate = res.estimate;
        if (cfg.record_iterates) out.trace.iterates.push_back(res.estimate);
        if (res.mean_change < cfg.tolerance) {
          out.trace.status = RunStatus::Converged;
          stop = true;
          break;
        }
      }
      current.covs = latest_covs;
      if (stop) return out;
    }
  } catch (const NumericalError& e) {
    out.trace.status = RunStatus::Failed;
    out.trace.failure = e.what();
    return out;
  }
  out.trace.status = RunStatus::MaxIterations;
  return out;
}

struct StepSelection {
  double alpha = 0.0;
  double cost = std::numeric_limits<double>::infinity();
  std::vector<double> candidate_alphas;
  std::vector<double> candidate_costs;
};

/**
 * Grid search over α ∈ {1/n, 2/n, ..., 1}. The smallest cost wins (ties go
 * to the smaller α); if no candidate improves on cost_at_zero, α = 0.
 */
template <typename CostAlong>
StepSelection select_step_grid(CostAlong&& cost_along, int n, double cost_at_zero) {
  StepSelection sel;
  for (int i = 1; i <= n; ++i) {
    const double alpha = static_cast<double>(i) / static_cast<double>(n);
    double c = cost_along(alpha);
    if (!std::isfinite(c)) c = std::numeric_limits<double>::infinity();
    sel.candidate_alphas.push_back(alpha);
    sel.candidate_costs.push_back(c);
    if (c < sel.cost) {
      sel.cost = c;
      sel.alpha = alpha;
    }
  }
  if (std::isinf(sel.cost)) throw NumericalError("line search: every candidate step has a non-finite cost");
  if (sel.cost > cost_at_zero) {
    sel.alpha = 0.0;
    sel.cost = cost_at_zero;
  }
  return sel;
}

/**
 * Backtracking from α = 1 until cost(α) ≤ cost(0) + c₁ α g, where g is the
 * directional derivative along the step. Returns α = 0 when no step
 * satisfies the condition within the backtracking budget.
 */
template <typename CostAlong>
StepSelection select_step_armijo(CostAlong&& cost_along, double cost_at_zero, double slope,
                                 const LineSearchConfig& cfg) {
  StepSelection sel;
  double alpha = 1.0;
  bool any_finite = false;
  for (int i = 0; i <= cfg.armijo_max_backtracks; ++i) {
    double c = cost_along(alpha);
    if (!std::isfinite(c)) c = std::numeric_limits<double>::infinity();
    any_finite = any_finite || std::isfinite(c);
    sel.candidate_alphas.push_back(alpha);
    sel.candidate_costs.push_back(c);
    if (c <= cost_at_zero + cfg.armijo_c1 * alpha * slope) {
      sel.alpha = alpha;
      sel.cost = c;
      return sel;
    }
    alpha *= cfg.armijo_shrink;
  }
  if (!any_finite) throw NumericalError("line search: every candidate step has a non-finite cost");
  sel.alpha = 0.0;
  sel.cost = cost_at_zero;
  return sel;
}

inline MeanSequence step_means(const MeanSequence& base, const MeanSequence& delta, double alpha) {
  MeanSequence out(base.size());
  for (std::size_t k = 0; k < base.size(); ++k) out[k] = base[k] + alpha * delta[k];
  return out;
}

/// LS-IEKS / LS-IPLS: Gauss–Newton proposal, then a step along the segment
/// chosen by grid search or Armijo backtracking on the frozen cost.
inline SmootherResult line_search_smoother(const NonlinearSSM& model, const MeasurementSequence& y,
                                           const TrajectoryEstimate& init, const SmootherConfig& cfg) {
  detail::check_inputs(model, y, init, cfg);
  if (cfg.safeguard != Safeguard::LineSearch) {
    throw std::invalid_argument("line_search_smoother: variant must be LS-IEKS or LS-IPLS");
  }
  const auto weights = std::make_shared<const ModelWeights>(model);
  const AffineSmoothOptions opts{cfg.covariance_form};
  SmootherResult out;
  out.estimate = init;
  if (cfg.record_iterates) out.trace.iterates.push_back(init);
  TrajectoryEstimate current = init;
  int iteration = 0;
  int epoch = 0;
  try {
    while (iteration < cfg.max_iterations) {
      ++epoch;
      const FrozenObjective frozen = freeze_objective(model, y, current, cfg, weights);
      std::vector<Matrix> tracked = current.covs;
      bool stop = false;
      for (int inner = 0; inner < cfg.inner_iterations && iteration < cfg.max_iterations; ++inner) {
        const AffineParams params =
            inner == 0 ? frozen.params : relinearize_with_frozen_errors(model, current, frozen, cfg);
        const TrajectoryEstimate proposal = affine_smooth(model, params, y, std::nullopt, opts);
        MeanSequence delta(proposal.means.size());
        for (std::size_t k = 0; k < delta.size(); ++k) delta[k] = proposal.means[k] - current.means[k];
        const double cost0 = frozen.cost(current.means);
        auto along = [&](double alpha) { return safe_cost(frozen.cost, step_means(current.means, delta, alpha)); };
        StepSelection sel;
        if (cfg.line_search.kind == LineSearchKind::Grid) {
          sel = select_step_grid(along, cfg.line_search.grid_points, cost0);
        } else {
          // For the Gauss–Newton step, ∇L·Δ = 2 (L̃(proposal) - L(current)),
          // with L̃ the linearized objective that the smoothing pass minimized.
          const double slope = 2.0 * (affine_cost(proposal.means, model, params, y) - cost0);
          sel = select_step_armijo(along, cost0, slope, cfg.line_search);
        }
        ++iteration;
        IterationRecord rec;
        rec.iteration = iteration;
        rec.cost_epoch = epoch;
        rec.cost_before = cost0;
        rec.cost = sel.cost;
        rec.alpha = sel.alpha;
        MeanSequence next = step_means(current.means, delta, sel.alpha);
        rec.mean_change = relative_mean_change(next, current.means);
        for (std::size_t k = 0; k < tracked.size(); ++k) {
          tracked[k] = symmetrize_psd(tracked[k] + sel.alpha * (proposal.covs[k] - tracked[k]));
        }
        current.means = std::move(next);
        out.trace.records.push_back(rec);
        out.estimate.means = current.means;
        out.estimate.covs = tracked;
        if (cfg.record_iterates) out.trace.iterates.push_back(out.estimate);
        if (rec.mean_change < cfg.tolerance) {
          out.trace.status = RunStatus::Converged;
          stop = true;
          break;
        }
      }
      current.covs = tracked;
      if (stop) return out;
    }
  } catch (const NumericalError& e) {
    out.trace.status = RunStatus::Failed;
    out.trace.failure = e.what();
    return out;
  }
  out.trace.status = RunStatus::MaxIterations;
  return out;
}

/// Dispatches on cfg.safeguard.
inline SmootherResult run_smoother(const NonlinearSSM& model, const MeasurementSequence& y,
                                   const TrajectoryEstimate& init, const SmootherConfig& cfg) {
  switch (cfg.safeguard) {
    case Safeguard::LevenbergMarquardt: return lm_smoother(model, y, init, cfg);
    case Safeguard::LineSearch: return line_search_smoother(model, y, init, cfg);
    default: return plain_smoother(model, y, init, cfg);
  }
}

}  // namespace itersmooth
