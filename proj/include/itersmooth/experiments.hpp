#pragma once

/**
 * Coordinated-turn motion, bearings-only sensors, affine-Gaussian
 * test models, simulation and the RMSE / NEES metrics.
 */

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "itersmooth/state_space.hpp"

namespace itersmooth {

// ---------------------------------------------------------------------------
// Coordinated turn

/// State (p_x, p_y, v_x, v_y, ω); T is the sampling period.
struct CoordinatedTurnParams {
  double T = 0.01;
  double q_v = 1e-4;
  double q_omega = 1e-2;

  void validate() const {
    if (!(T > 0.0)) throw std::invalid_argument("coordinated turn: T must be positive");
    if (!(q_v >= 0.0) || !(q_omega >= 0.0)) throw std::invalid_argument("coordinated turn: noise intensities must be >= 0");
  }
};

inline constexpr Index kCtStateDim = 5;
inline constexpr double kCtSeriesThreshold = 1e-8;

/// sin(ωT)/ω, (1 - cos ωT)/ω and their ω-derivatives.
struct CtCoefficients {
  double a = 0.0;
  double b = 0.0;
  double da = 0.0;
  double db = 0.0;
};

inline CtCoefficients ct_coefficients_exact(double omega, double T) {
  const double u = omega * T;
  const double s = std::sin(u);
  const double c = std::cos(u);
  const double half = std::sin(0.5 * u);
  CtCoefficients co;
  co.a = s / omega;
  co.b = 2.0 * half * half / omega;
  co.da = T * c / omega - s / (omega * omega);
  co.db = T * s / omega - co.b / omega;
  return co;
}

inline CtCoefficients ct_coefficients_series(double omega, double T) {
  const double w2 = omega * omega;
  const double T2 = T * T;
  CtCoefficients co;
  co.a = T - w2 * T2 * T / 6.0;
  co.b = omega * T2 / 2.0 - w2 * omega * T2 * T2 / 24.0;
  co.da = -omega * T2 * T / 3.0 + w2 * omega * T2 * T2 * T / 30.0;
  co.db = T2 / 2.0 - w2 * T2 * T2 / 8.0;
  return co;
}

inline CtCoefficients ct_coefficients(double omega, double T) {
  return std::abs(omega * T) < kCtSeriesThreshold ? ct_coefficients_series(omega, T) : ct_coefficients_exact(omega, T);
}

namespace detail {

inline void check_ct_state(const Vector& x) {
  if (x.size() != kCtStateDim) throw std::invalid_argument("coordinated turn: state must have 5 components");
}

inline Vector ct_apply(const Vector& x, double T, const CtCoefficients& co) {
  check_ct_state(x);
  const double u = x(4) * T;
  const double s = std::sin(u);
  const double c = std::cos(u);
  Vector out(kCtStateDim);
  out(0) = x(0) + co.a * x(2) - co.b * x(3);
  out(1) = x(1) + co.b * x(2) + co.a * x(3);
  out(2) = c * x(2) - s * x(3);
  out(3) = s * x(2) + c * x(3);
  out(4) = x(4);
  return out;
}

}  // namespace detail

inline Vector ct_motion(const Vector& x, double T) { return detail::ct_apply(x, T, ct_coefficients(x(4), T)); }
inline Vector ct_motion_exact(const Vector& x, double T) {
  return detail::ct_apply(x, T, ct_coefficients_exact(x(4), T));
}
inline Vector ct_motion_series(const Vector& x, double T) {
  return detail::ct_apply(x, T, ct_coefficients_series(x(4), T));
}

inline Matrix ct_jacobian(const Vector& x, double T) {
  detail::check_ct_state(x);
  const CtCoefficients co = ct_coefficients(x(4), T);
  const double u = x(4) * T;
  const double s = std::sin(u);
  const double c = std::cos(u);
  Matrix J = Matrix::Identity(kCtStateDim, kCtStateDim);
  J(0, 2) = co.a;
  J(0, 3) = -co.b;
  J(1, 2) = co.b;
  J(1, 3) = co.a;
  J(2, 2) = c;
  J(2, 3) = -s;
  J(3, 2) = s;
  J(3, 3) = c;
  J(0, 4) = co.da * x(2) - co.db * x(3);
  J(1, 4) = co.db * x(2) + co.da * x(3);
  J(2, 4) = -T * (s * x(2) + c * x(3));
  J(3, 4) = T * (c * x(2) - s * x(3));
  return J;
}

/// Discretized white-acceleration blocks for (p, v) on each axis plus q_ω T.
inline Matrix ct_process_noise(const CoordinatedTurnParams& p) {
  p.validate();
  const double T = p.T;
  Matrix Q = Matrix::Zero(kCtStateDim, kCtStateDim);
  for (Index axis = 0; axis < 2; ++axis) {
    Q(axis, axis) = p.q_v * T * T * T / 3.0;
    Q(axis, axis + 2) = p.q_v * T * T / 2.0;
    Q(axis + 2, axis) = p.q_v * T * T / 2.0;
    Q(axis + 2, axis + 2) = p.q_v * T;
  }
  Q(4, 4) = p.q_omega * T;
  return Q;
}

// ---------------------------------------------------------------------------
// Bearings-only sensors

using Point2 = Eigen::Vector2d;

/// Sensors active at one timestep, with their noise standard deviations.
struct SensorSlot {
  std::vector<std::size_t> active;
  std::vector<double> stds;
};

struct BearingsSensorConfig {
  std::vector<Point2> positions;
  std::vector<double> stds;
  std::map<Index, SensorSlot> schedule;  // timestep -> override

  void validate() const {
    if (positions.empty()) throw std::invalid_argument("bearings: at least one sensor is required");
    if (stds.size() != positions.size()) throw std::invalid_argument("bearings: one std per sensor is required");
    for (double s : stds) {
      if (!(s > 0.0)) throw std::invalid_argument("bearings: sensor stds must be positive");
    }
    for (const auto& [k, slot] : schedule) {
      if (k < 0) throw std::invalid_argument("bearings: schedule timesteps must be >= 0");
      if (slot.active.size() != slot.stds.size()) {
        throw std::invalid_argument("bearings: schedule entry needs one std per active sensor");
      }
      for (std::size_t i : slot.active) {
        if (i >= positions.size()) throw std::invalid_argument("bearings: schedule names an unknown sensor");
      }
      for (double s : slot.stds) {
        if (!(s > 0.0)) throw std::invalid_argument("bearings: schedule stds must be positive");
      }
    }
  }

  SensorSlot slot(Index k) const {
    const auto it = schedule.find(k);
    if (it != schedule.end()) return it->second;
    SensorSlot all;
    for (std::size_t i = 0; i < positions.size(); ++i) all.active.push_back(i);
    all.stds = stds;
    return all;
  }

  Matrix noise(Index k) const {
    const SensorSlot s = slot(k);
    Matrix R = Matrix::Zero(static_cast<Index>(s.stds.size()), static_cast<Index>(s.stds.size()));
    for (std::size_t i = 0; i < s.stds.size(); ++i) R(static_cast<Index>(i), static_cast<Index>(i)) = s.stds[i] * s.stds[i];
    return R;
  }

  /// (-1.5, 0.5) and (1, 1), both with σ = 0.5 rad.
  static BearingsSensorConfig two_sensors() {
    BearingsSensorConfig cfg;
    cfg.positions = {Point2(-1.5, 0.5), Point2(1.0, 1.0)};
    cfg.stds = {0.5, 0.5};
    return cfg;
  }

  /// Adds a single-sensor low-noise reading at 1-based steps every, 2·every, ...
  /// up to `horizon` (0-based indices every-1, 2·every-1, ...).
  void add_periodic_override(Index horizon, Index every, std::size_t sensor, double std) {
    if (every < 1) throw std::invalid_argument("bearings: override period must be positive");
    for (Index k = every - 1; k < horizon; k += every) schedule[k] = SensorSlot{{sensor}, {std}};
  }
};

inline void check_sensor_distance(double dx, double dy) {
  if (dx == 0.0 && dy == 0.0) throw NumericalError("bearings: target coincides with a sensor");
}

/// atan2(p_y - s_y, p_x - s_x) for each active sensor at timestep k.
inline Vector bearings_measurement(const Vector& x, const BearingsSensorConfig& cfg, Index k) {
  const SensorSlot s = cfg.slot(k);
  Vector out(static_cast<Index>(s.active.size()));
  for (std::size_t i = 0; i < s.active.size(); ++i) {
    const Point2& p = cfg.positions[s.active[i]];
    const double dx = x(0) - p.x();
    const double dy = x(1) - p.y();
    check_sensor_distance(dx, dy);
    out(static_cast<Index>(i)) = std::atan2(dy, dx);
  }
  return out;
}

inline Matrix bearings_jacobian(const Vector& x, const BearingsSensorConfig& cfg, Index k) {
  const SensorSlot s = cfg.slot(k);
  Matrix J = Matrix::Zero(static_cast<Index>(s.active.size()), x.size());
  for (std::size_t i = 0; i < s.active.size(); ++i) {
    const Point2& p = cfg.positions[s.active[i]];
    const double dx = x(0) - p.x();
    const double dy = x(1) - p.y();
    check_sensor_distance(dx, dy);
    const double r2 = dx * dx + dy * dy;
    J(static_cast<Index>(i), 0) = -dy / r2;
    J(static_cast<Index>(i), 1) = dx / r2;
  }
  return J;
}

/// Wraps an angle into (-π, π].
inline double wrap_angle(double a) {
  constexpr double pi = std::numbers::pi;
  double w = std::remainder(a, 2.0 * pi);
  if (w <= -pi) w += 2.0 * pi;
  return w;
}

// ---------------------------------------------------------------------------
// Scenarios

struct CtScenario {
  CoordinatedTurnParams motion{};
  Vector prior_mean = (Vector(5) << 0.1, 0.2, 1.0, 0.0, 0.0).finished();
  Matrix prior_cov = Vector((Vector(5) << 0.1, 0.1, 1.0, 1.0, 1.0).finished()).asDiagonal();
  Index horizon = 500;
  BearingsSensorConfig sensors = BearingsSensorConfig::two_sensors();
  bool wrap_angles = false;

  /// Two sensors throughout.
  static CtScenario constant_sensors() { return {}; }

  /// Two sensors, except a single σ = 0.025 reading from the (1, 1) sensor
  /// every 50th step.
  static CtScenario time_varying_sensors() {
    CtScenario s;
    s.sensors.add_periodic_override(s.horizon, 50, 1, 0.025);
    return s;
  }
};

inline NonlinearSSM make_ct_model(const CtScenario& sc) {
  sc.motion.validate();
  sc.sensors.validate();
  if (sc.horizon < 1) throw std::invalid_argument("ct scenario: horizon must be positive");
  const double T = sc.motion.T;
  TimeVaryingMap motion{[T](Index, const Vector& x) { return ct_motion(x, T); },
                        [T](Index, const Vector& x) { return ct_jacobian(x, T); }};
  const BearingsSensorConfig sensors = sc.sensors;
  TimeVaryingMap meas{[sensors](Index k, const Vector& x) { return bearings_measurement(x, sensors, k); },
                      [sensors](Index k, const Vector& x) { return bearings_jacobian(x, sensors, k); }};
  std::vector<Matrix> Q(static_cast<std::size_t>(sc.horizon - 1), ct_process_noise(sc.motion));
  std::vector<Matrix> R;
  for (Index k = 0; k < sc.horizon; ++k) R.push_back(sensors.noise(k));
  ResidualAdjuster adjust;
  if (sc.wrap_angles) {
    adjust = [](Index, Vector& r) {
      for (Index i = 0; i < r.size(); ++i) r(i) = wrap_angle(r(i));
    };
  }
  return NonlinearSSM(sc.horizon, Gaussian(sc.prior_mean, sc.prior_cov), std::move(motion), std::move(Q),
                      std::move(meas), std::move(R), std::move(adjust));
}

/// x_{k+1} = A x_k + a + q,  y_k = C x_k + c + r, time-invariant.
struct LinearGaussianSpec {
  Matrix A;
  Vector a;
  Matrix Q;
  Matrix C;
  Vector c;
  Matrix R;
  Vector prior_mean;
  Matrix prior_cov;
  Index horizon = 50;
};

inline NonlinearSSM make_linear_model(const LinearGaussianSpec& s) {
  const Index dx = s.A.rows();
  if (s.A.cols() != dx || s.a.size() != dx || s.C.cols() != dx || s.c.size() != s.C.rows() ||
      s.prior_mean.size() != dx) {
    throw std::invalid_argument("linear model: dimension mismatch");
  }
  const Matrix A = s.A, C = s.C;
  const Vector a = s.a, c = s.c;
  TimeVaryingMap motion{[A, a](Index, const Vector& x) -> Vector { return A * x + a; },
                        [A](Index, const Vector&) -> Matrix { return A; }};
  TimeVaryingMap meas{[C, c](Index, const Vector& x) -> Vector { return C * x + c; },
                      [C](Index, const Vector&) -> Matrix { return C; }};
  return NonlinearSSM(s.horizon, Gaussian(s.prior_mean, s.prior_cov), std::move(motion),
                      std::vector<Matrix>(static_cast<std::size_t>(s.horizon - 1), s.Q), std::move(meas),
                      std::vector<Matrix>(static_cast<std::size_t>(s.horizon), s.R));
}

namespace detail {

inline Matrix random_gaussian_matrix(std::mt19937_64& rng, Index rows, Index cols) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Matrix M(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) M(i, j) = n01(rng);
  }
  return M;
}

inline Matrix random_spd(std::mt19937_64& rng, Index d, double floor) {
  const Matrix B = random_gaussian_matrix(rng, d, d);
  return B * B.transpose() / static_cast<double>(d) + floor * Matrix::Identity(d, d);
}

}  // namespace detail

/// Random stable affine-Gaussian model: A scaled to spectral norm 0.95.
inline LinearGaussianSpec random_linear_spec(std::uint64_t seed, Index horizon, Index dx, Index dy) {
  std::mt19937_64 rng(seed);
  LinearGaussianSpec s;
  Matrix A = detail::random_gaussian_matrix(rng, dx, dx);
  const double norm = Eigen::JacobiSVD<Matrix>(A).singularValues()(0);
  s.A = 0.95 * A / norm;
  s.a = 0.1 * detail::random_gaussian_matrix(rng, dx, 1);
  s.Q = 0.1 * detail::random_spd(rng, dx, 0.1);
  s.C = detail::random_gaussian_matrix(rng, dy, dx);
  s.c = 0.1 * detail::random_gaussian_matrix(rng, dy, 1);
  s.R = 0.1 * detail::random_spd(rng, dy, 0.1);
  s.prior_mean = detail::random_gaussian_matrix(rng, dx, 1);
  s.prior_cov = detail::random_spd(rng, dx, 0.2);
  s.horizon = horizon;
  return s;
}

// ---------------------------------------------------------------------------
// Simulation

struct Simulation {
  std::vector<Vector> states;
  MeasurementSequence measurements;
};

/// Square root L with L Lᵀ = cov for any PSD cov (zero allowed).
inline Matrix psd_square_root(const Matrix& cov) {
  if (cov.size() == 0) return cov;
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (cov + cov.transpose()));
  const Vector roots = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * roots.asDiagonal();
}

namespace detail {

inline Vector standard_normal(std::mt19937_64& rng, Index d) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Vector v(d);
  for (Index i = 0; i < d; ++i) v(i) = n01(rng);
  return v;
}

}  // namespace detail

/**
 * Draws x_0 ~ N(m0, P0), x_{k+1} = f(k, x_k) + q_k, y_k = h(k, x_k) + r_k.
 * Covariances only need to be PSD here, so noise-free runs are possible.
 */
template <typename Motion, typename Meas>
Simulation simulate(const Vector& m0, const Matrix& P0, Motion&& f, const std::vector<Matrix>& Q, Meas&& h,
                    const std::vector<Matrix>& R, Index horizon, std::uint64_t seed) {
  if (static_cast<Index>(Q.size()) != horizon - 1 || static_cast<Index>(R.size()) != horizon) {
    throw std::invalid_argument("simulate: noise sequences do not match the horizon");
  }
  std::mt19937_64 rng(seed);
  Simulation sim;
  Vector x = m0 + psd_square_root(P0) * detail::standard_normal(rng, m0.size());
  for (Index k = 0; k < horizon; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    if (k > 0) x = f(k - 1, x) + psd_square_root(Q[ks - 1]) * detail::standard_normal(rng, x.size());
    sim.states.push_back(x);
    const Index dy = R[ks].rows();
    if (dy == 0) {
      sim.measurements.emplace_back(0);
    } else {
      sim.measurements.push_back(h(k, x) + psd_square_root(R[ks]) * detail::standard_normal(rng, dy));
    }
  }
  return sim;
}

inline Simulation simulate(const NonlinearSSM& model, std::uint64_t seed) {
  std::vector<Matrix> Q, R;
  for (Index k = 0; k + 1 < model.horizon(); ++k) Q.push_back(model.motion_noise(k));
  for (Index k = 0; k < model.horizon(); ++k) R.push_back(model.meas_noise(k));
  return simulate(
      model.prior().mean(), model.prior().cov(), [&](Index k, const Vector& x) { return model.f(k, x); }, Q,
      [&](Index k, const Vector& x) { return model.h(k, x); }, R, model.horizon(), seed);
}

// ---------------------------------------------------------------------------
// Metrics

inline const std::vector<Index>& position_components() {
  static const std::vector<Index> pos{0, 1};
  return pos;
}

/// sqrt((1/K) Σ_k ‖(est_k - true_k)[components]‖²).
inline double rmse(const std::vector<Vector>& est, const std::vector<Vector>& truth,
                   const std::vector<Index>& components = position_components()) {
  if (est.size() != truth.size() || est.empty()) throw std::invalid_argument("rmse: sequence lengths differ or are empty");
  double acc = 0.0;
  for (std::size_t k = 0; k < est.size(); ++k) {
    if (est[k].size() != truth[k].size()) throw std::invalid_argument("rmse: state sizes differ");
    for (Index c : components) {
      if (c < 0 || c >= est[k].size()) throw std::invalid_argument("rmse: component out of range");
      const double e = est[k](c) - truth[k](c);
      acc += e * e;
    }
  }
  return std::sqrt(acc / static_cast<double>(est.size()));
}

struct NeesResult {
  std::vector<double> per_step;
  double mean = 0.0;
};

/// ε_k = (x̂_k - x_k)ᵀ P̂_k⁻¹ (x̂_k - x_k), restricted to `components` when given.
inline NeesResult nees(const TrajectoryEstimate& est, const std::vector<Vector>& truth,
                       const std::vector<Index>& components = {}) {
  if (est.means.size() != truth.size() || truth.empty()) throw std::invalid_argument("nees: sequence lengths differ");
  NeesResult out;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    Vector e = est.means[k] - truth[k];
    Matrix P = est.covs[k];
    if (!components.empty()) {
      const auto n = static_cast<Index>(components.size());
      Vector es(n);
      Matrix Ps(n, n);
      for (Index i = 0; i < n; ++i) {
        es(i) = e(components[static_cast<std::size_t>(i)]);
        for (Index j = 0; j < n; ++j) {
          Ps(i, j) = P(components[static_cast<std::size_t>(i)], components[static_cast<std::size_t>(j)]);
        }
      }
      e = es;
      P = Ps;
    }
    Eigen::LLT<Matrix> llt(P);
    if (llt.info() != Eigen::Success) throw NumericalError("nees: covariance is singular");
    out.per_step.push_back(e.dot(llt.solve(e)));
    out.mean += out.per_step.back();
  }
  out.mean /= static_cast<double>(truth.size());
  return out;
}

}  // namespace itersmooth
