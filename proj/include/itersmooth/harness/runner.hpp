#pragma once

/**
 * Monte-Carlo experiment runner: per-trial simulation, smoothing,
 * per-iteration metrics, aggregation and result files.
 *
 * Outputs are byte-identical for a fixed configuration and seed regardless
 * of the worker count: trials write only their own files and aggregation
 * runs in trial order after all workers finish.
 */

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "itersmooth/harness/config.hpp"

#ifndef ITERSMOOTH_VERSION
#define ITERSMOOTH_VERSION "0.0.0"
#endif

namespace itersmooth::harness {

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline NonlinearSSM make_model(const ExperimentConfig& cfg) {
  if (cfg.model == ModelKind::Linear) {
    return make_linear_model(
        random_linear_spec(cfg.linear.model_seed, cfg.horizon, cfg.linear.state_dim, cfg.linear.meas_dim));
  }
  CtScenario sc = cfg.ct;
  sc.horizon = cfg.horizon;
  return make_ct_model(sc);
}

inline std::vector<std::string> component_names(const ExperimentConfig& cfg) {
  if (cfg.model == ModelKind::CoordinatedTurn) return {"px", "py", "vx", "vy", "omega"};
  std::vector<std::string> names;
  for (Index i = 0; i < cfg.linear.state_dim; ++i) names.push_back("x" + std::to_string(i));
  return names;
}

inline std::uint64_t trial_seed(const ExperimentConfig& cfg, int trial) {
  return cfg.seed + static_cast<std::uint64_t>(trial);
}

/// Per-iteration metrics of one smoother on one trial. Index 0 is the
/// initial estimate; iterations after termination repeat the last estimate.
struct SmootherTrialResult {
  std::vector<double> rmse;
  std::vector<double> nees;
  std::vector<double> cost;
  std::vector<bool> diverged;
  RunStatus status = RunStatus::MaxIterations;
  std::string failure;
  int iterations = 0;
  TrajectoryEstimate final_estimate;
};

struct TrialResult {
  std::uint64_t seed = 0;
  std::vector<Vector> truth;
  std::vector<SmootherTrialResult> smoothers;
};

inline TrajectoryEstimate initial_estimate(const ExperimentConfig& cfg, const NonlinearSSM& model,
                                           const MeasurementSequence& y, const SmootherConfig& sc) {
  switch (cfg.initialization) {
    case InitKind::FixedZero:
      return TrajectoryEstimate::constant(model.horizon(), Vector::Zero(model.state_dim()), model.prior().cov());
    case InitKind::PriorMean:
      return TrajectoryEstimate::constant(model.horizon(), model.prior().mean(), model.prior().cov());
    default:
      return non_iterative_smoother(model, y, sc.linearization_config(), {sc.covariance_form});
  }
}

namespace detail {

inline double nees_or_nan(const TrajectoryEstimate& est, const std::vector<Vector>& truth,
                          const std::vector<Index>& comps) {
  try {
    return nees(est, truth, comps).mean;
  } catch (const std::exception&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

inline double rmse_or_nan(const TrajectoryEstimate& est, const std::vector<Vector>& truth,
                          const std::vector<Index>& comps) {
  const double r = rmse(est.means, truth, comps);
  return std::isfinite(r) ? r : std::numeric_limits<double>::infinity();
}

}  // namespace detail

/**
 * Runs every configured smoother on one simulated trial.
 *
 * A smoother is counted as diverged at iteration i when it has failed
 * numerically by then, or when the nonlinear cost ieks_cost at its
 * iterate is non-finite or larger than at the initial estimate.
 */
inline TrialResult run_trial(const ExperimentConfig& cfg, const NonlinearSSM& model, int trial) {
  TrialResult out;
  out.seed = trial_seed(cfg, trial);
  Simulation sim = simulate(model, out.seed);
  out.truth = sim.states;
  const MeasurementSequence& y = sim.measurements;
  const ModelWeights weights(model);
  auto nonlinear_cost = [&](const TrajectoryEstimate& e) {
    try {
      return ieks_cost(e.means, model, y, weights);
    } catch (const std::exception&) {
      return std::numeric_limits<double>::infinity();
    }
  };
  for (const auto& entry : cfg.smoothers) {
    SmootherConfig sc = entry.config;
    sc.record_iterates = true;
    SmootherTrialResult r;
    std::vector<TrajectoryEstimate> iterates;
    try {
      const TrajectoryEstimate init = initial_estimate(cfg, model, y, sc);
      SmootherResult res = run_smoother(model, y, init, sc);
      iterates = std::move(res.trace.iterates);
      r.status = res.trace.status;
      r.failure = res.trace.failure;
      r.iterations = static_cast<int>(res.trace.records.size());
    } catch (const std::exception& e) {
      r.status = RunStatus::Failed;
      r.failure = e.what();
    }
    const bool init_failed = iterates.empty();
    if (init_failed) {
      iterates.push_back(TrajectoryEstimate::constant(model.horizon(), model.prior().mean(), model.prior().cov()));
    }
    const std::size_t valid = iterates.size();
    const double cost0 = nonlinear_cost(iterates.front());
    for (int i = 0; i <= sc.max_iterations; ++i) {
      const auto idx = std::min(static_cast<std::size_t>(i), valid - 1);
      const TrajectoryEstimate& est = iterates[idx];
      if (idx == static_cast<std::size_t>(i) || r.cost.empty()) {
        r.rmse.push_back(detail::rmse_or_nan(est, out.truth, cfg.rmse_components));
        r.nees.push_back(detail::nees_or_nan(est, out.truth, cfg.nees_components));
        r.cost.push_back(nonlinear_cost(est));
      } else {
        r.rmse.push_back(r.rmse.back());
        r.nees.push_back(r.nees.back());
        r.cost.push_back(r.cost.back());
      }
      const bool failed_by_now =
          init_failed || (r.status == RunStatus::Failed && static_cast<std::size_t>(i) >= valid);
      r.diverged.push_back(failed_by_now || !std::isfinite(r.cost.back()) || r.cost.back() > cost0);
    }
    r.final_estimate = std::move(iterates.back());
    out.smoothers.push_back(std::move(r));
  }
  return out;
}

struct MetricRow {
  std::string smoother;
  int iteration = 0;
  double rmse_mean = 0.0;
  double rmse_se = 0.0;
  double nees_mean = 0.0;
  double nees_se = 0.0;
  double diverged_fraction = 0.0;
  double mean_cost = 0.0;
};

namespace detail {

// Mean and standard error (sample standard deviation / sqrt(n)), in order.
inline std::pair<double, double> mean_and_se(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / n;
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

}  // namespace detail

/// Per-iteration aggregates over trials, reduced in trial order.
inline std::vector<MetricRow> aggregate(const ExperimentConfig& cfg, const std::vector<TrialResult>& trials) {
  std::vector<MetricRow> rows;
  for (std::size_t s = 0; s < cfg.smoothers.size(); ++s) {
    const int iters = cfg.smoothers[s].config.max_iterations;
    for (int i = 0; i <= iters; ++i) {
      std::vector<double> rm, ne, co;
      double diverged = 0.0;
      for (const auto& t : trials) {
        const auto& r = t.smoothers[s];
        rm.push_back(r.rmse[static_cast<std::size_t>(i)]);
        ne.push_back(r.nees[static_cast<std::size_t>(i)]);
        co.push_back(r.cost[static_cast<std::size_t>(i)]);
        diverged += r.diverged[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
      }
      MetricRow row;
      row.smoother = cfg.smoothers[s].label;
      row.iteration = i;
      std::tie(row.rmse_mean, row.rmse_se) = detail::mean_and_se(rm);
      std::tie(row.nees_mean, row.nees_se) = detail::mean_and_se(ne);
      row.mean_cost = detail::mean_and_se(co).first;
      row.diverged_fraction = diverged / static_cast<double>(trials.size());
      rows.push_back(row);
    }
  }
  return rows;
}

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream out;
  out << "smoother,iteration,rmse_mean,rmse_se,nees_mean,nees_se,diverged_fraction,mean_cost\n";
  for (const auto& r : rows) {
    out << r.smoother << ',' << r.iteration << ',' << format_double(r.rmse_mean) << ',' << format_double(r.rmse_se)
        << ',' << format_double(r.nees_mean) << ',' << format_double(r.nees_se) << ','
        << format_double(r.diverged_fraction) << ',' << format_double(r.mean_cost) << '\n';
  }
  return out.str();
}

inline std::string trajectory_csv(const std::vector<std::string>& names, const std::vector<Vector>& truth,
                                  const TrajectoryEstimate& est) {
  std::ostringstream out;
  out << "k";
  for (const auto& n : names) out << ",true_" << n;
  for (const auto& n : names) out << ",est_mean_" << n;
  for (const auto& n : names) out << ",est_var_" << n;
  out << '\n';
  for (std::size_t k = 0; k < truth.size(); ++k) {
    out << k;
    for (Index i = 0; i < truth[k].size(); ++i) out << ',' << format_double(truth[k](i));
    for (Index i = 0; i < est.means[k].size(); ++i) out << ',' << format_double(est.means[k](i));
    for (Index i = 0; i < est.covs[k].rows(); ++i) out << ',' << format_double(est.covs[k](i, i));
    out << '\n';
  }
  return out.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << content;
  out.close();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline const char* status_name(RunStatus s) {
  switch (s) {
    case RunStatus::Converged: return "converged";
    case RunStatus::Failed: return "failed";
    default: return "max_iterations";
  }
}

struct RunSummary {
  std::vector<MetricRow> rows;
  std::filesystem::path metrics_path;
  std::filesystem::path manifest_path;
};

/// Runs all trials on `workers` threads (0 means hardware concurrency).
inline std::vector<TrialResult> run_trials(const ExperimentConfig& cfg, const NonlinearSSM& model, unsigned workers,
                                           const std::function<void(const TrialResult&, int)>& on_trial = {}) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min<unsigned>(workers, static_cast<unsigned>(cfg.trials));
  std::vector<TrialResult> results(static_cast<std::size_t>(cfg.trials));
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&]() {
    while (true) {
      const int t = next.fetch_add(1);
      if (t >= cfg.trials) return;
      try {
        results[static_cast<std::size_t>(t)] = run_trial(cfg, model, t);
        if (on_trial) on_trial(results[static_cast<std::size_t>(t)], t);
        // Final estimates are only needed by the callback.
        for (auto& s : results[static_cast<std::size_t>(t)].smoothers) s.final_estimate = {};
        results[static_cast<std::size_t>(t)].truth.clear();
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(cfg.trials);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
  return results;
}

/// Runs the experiment and writes metrics.csv, manifest.json and (when
/// enabled) trajectories/<trial>_<smoother>.csv into `out_dir`.
inline RunSummary run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                 unsigned workers = 0) {
  namespace fs = std::filesystem;
  const NonlinearSSM model = make_model(cfg);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create output directory '" + out_dir.string() + "'");
  const fs::path traj_dir = out_dir / "trajectories";
  if (cfg.write_trajectories) {
    fs::create_directories(traj_dir, ec);
    if (ec) throw IoError("cannot create '" + traj_dir.string() + "'");
  }
  const auto names = component_names(cfg);
  auto write_trajectories = [&](const TrialResult& r, int trial) {
    if (!cfg.write_trajectories) return;
    for (std::size_t s = 0; s < cfg.smoothers.size(); ++s) {
      write_file(traj_dir / (std::to_string(trial) + "_" + cfg.smoothers[s].label + ".csv"),
                 trajectory_csv(names, r.truth, r.smoothers[s].final_estimate));
    }
  };
  const std::vector<TrialResult> trials = run_trials(cfg, model, workers, write_trajectories);

  RunSummary summary;
  summary.rows = aggregate(cfg, trials);
  summary.metrics_path = out_dir / "metrics.csv";
  write_file(summary.metrics_path, metrics_csv(summary.rows));

  json per_trial = json::array();
  for (std::size_t t = 0; t < trials.size(); ++t) {
    json outcomes = json::object();
    for (std::size_t s = 0; s < cfg.smoothers.size(); ++s) {
      const auto& r = trials[t].smoothers[s];
      outcomes[cfg.smoothers[s].label] = {{"status", status_name(r.status)},
                                          {"iterations", r.iterations},
                                          {"failure", r.failure},
                                          {"diverged", static_cast<bool>(r.diverged.back())},
                                          {"final_rmse", r.rmse.back()}};
    }
    per_trial.push_back({{"trial", t}, {"seed", trials[t].seed}, {"outcomes", outcomes}});
  }
  const json manifest = {{"library", "itersmooth"},
                         {"version", ITERSMOOTH_VERSION},
                         {"config", to_json(cfg)},
                         {"trials", per_trial}};
  summary.manifest_path = out_dir / "manifest.json";
  write_file(summary.manifest_path, manifest.dump(2) + "\n");
  return summary;
}

}  // namespace itersmooth::harness
