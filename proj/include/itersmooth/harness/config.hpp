#pragma once

/**
 * Experiment configuration: strict JSON parsing, defaults, and the
 * resolved form written to the run manifest.
 *
 * Every key is optional unless noted; unknown keys are rejected.
 */

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "itersmooth/experiments.hpp"
#include "itersmooth/iterative_smoothers.hpp"

namespace itersmooth::harness {

using json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ModelKind { CoordinatedTurn, Linear };
enum class InitKind { NonIterative, FixedZero, PriorMean };

struct LinearModelConfig {
  Index state_dim = 4;
  Index meas_dim = 2;
  std::uint64_t model_seed = 7;
};

struct SmootherEntry {
  std::string label;  // unique name used in outputs
  SmootherConfig config;
};

struct ExperimentConfig {
  ModelKind model = ModelKind::CoordinatedTurn;
  CtScenario ct = CtScenario::constant_sensors();
  std::vector<json> sensor_overrides;  // kept verbatim for the manifest
  LinearModelConfig linear{};
  Index horizon = 500;
  int trials = 100;
  std::uint64_t seed = 0;
  InitKind initialization = InitKind::NonIterative;
  std::vector<SmootherEntry> smoothers;
  std::vector<Index> rmse_components{0, 1};
  std::vector<Index> nees_components;  // empty: full state
  bool write_trajectories = true;
  std::string output_dir = "results";

  Index state_dim() const { return model == ModelKind::CoordinatedTurn ? kCtStateDim : linear.state_dim; }
};

namespace detail {

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline double get_number(const json& obj, const char* key, double fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  if (!obj.at(key).is_number()) throw ConfigError(where + "." + key + ": expected a number");
  return obj.at(key).get<double>();
}

inline std::vector<double> get_numbers(const json& obj, const char* key, std::vector<double> fallback,
                                       const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const json& arr = obj.at(key);
  if (!arr.is_array()) throw ConfigError(where + "." + key + ": expected an array of numbers");
  std::vector<double> out;
  for (const auto& v : arr) {
    if (!v.is_number()) throw ConfigError(where + "." + key + ": expected an array of numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

inline std::vector<Index> get_indices(const json& obj, const char* key, std::vector<Index> fallback,
                                      const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const json& arr = obj.at(key);
  if (!arr.is_array()) throw ConfigError(where + "." + key + ": expected an array of integers");
  std::vector<Index> out;
  for (const auto& v : arr) {
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ConfigError(where + "." + key + ": expected nonnegative integers");
    }
    out.push_back(v.get<Index>());
  }
  return out;
}

inline Vector to_vector(const std::vector<double>& v) {
  Vector out(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Index>(i)) = v[i];
  return out;
}

inline std::vector<double> from_vector(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline void parse_sensors(const json& j, ExperimentConfig& cfg) {
  const std::string where = "model.sensors";
  reject_unknown(j, {"positions", "stds", "periodic_overrides", "wrap_angles"}, where);
  BearingsSensorConfig sensors;
  if (j.contains("positions")) {
    if (!j.at("positions").is_array()) throw ConfigError(where + ".positions: expected [[x, y], ...]");
    for (const auto& p : j.at("positions")) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
        throw ConfigError(where + ".positions: expected [[x, y], ...]");
      }
      sensors.positions.emplace_back(p[0].get<double>(), p[1].get<double>());
    }
  } else {
    sensors.positions = BearingsSensorConfig::two_sensors().positions;
  }
  sensors.stds = get_numbers(j, "stds", std::vector<double>(sensors.positions.size(), 0.5), where);
  cfg.ct.wrap_angles = get_or<bool>(j, "wrap_angles", false, where);
  cfg.sensor_overrides.clear();
  if (j.contains("periodic_overrides")) {
    if (!j.at("periodic_overrides").is_array()) throw ConfigError(where + ".periodic_overrides: expected an array");
    for (const auto& o : j.at("periodic_overrides")) {
      const std::string ow = where + ".periodic_overrides[]";
      reject_unknown(o, {"every", "sensor", "std"}, ow);
      if (!o.contains("every") || !o.contains("sensor") || !o.contains("std")) {
        throw ConfigError(ow + ": 'every', 'sensor' and 'std' are required");
      }
      const auto every = get_or<long long>(o, "every", 0, ow);
      const auto sensor = get_or<long long>(o, "sensor", -1, ow);
      const double std = get_number(o, "std", 0.0, ow);
      if (every < 1) throw ConfigError(ow + ".every: must be >= 1");
      if (sensor < 0 || static_cast<std::size_t>(sensor) >= sensors.positions.size()) {
        throw ConfigError(ow + ".sensor: index out of range");
      }
      if (!(std > 0.0)) throw ConfigError(ow + ".std: must be positive");
      cfg.sensor_overrides.push_back(o);
    }
  }
  try {
    sensors.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
  cfg.ct.sensors = std::move(sensors);
}

inline void apply_overrides(ExperimentConfig& cfg) {
  cfg.ct.sensors.schedule.clear();
  for (const auto& o : cfg.sensor_overrides) {
    cfg.ct.sensors.add_periodic_override(cfg.horizon, o.at("every").get<Index>(), o.at("sensor").get<std::size_t>(),
                                         o.at("std").get<double>());
  }
}

inline void parse_model(const json& j, ExperimentConfig& cfg) {
  const std::string where = "model";
  if (!j.is_object()) throw ConfigError("model: expected an object");
  const auto type = get_or<std::string>(j, "type", "coordinated_turn", where);
  if (type == "coordinated_turn") {
    reject_unknown(j, {"type", "horizon", "T", "q_v", "q_omega", "prior_mean", "prior_cov_diag", "sensors"}, where);
    cfg.model = ModelKind::CoordinatedTurn;
    cfg.horizon = get_or<Index>(j, "horizon", 500, where);
    cfg.ct.motion.T = get_number(j, "T", 0.01, where);
    cfg.ct.motion.q_v = get_number(j, "q_v", 1e-4, where);
    cfg.ct.motion.q_omega = get_number(j, "q_omega", 1e-2, where);
    const auto mean = get_numbers(j, "prior_mean", {0.1, 0.2, 1.0, 0.0, 0.0}, where);
    const auto diag = get_numbers(j, "prior_cov_diag", {0.1, 0.1, 1.0, 1.0, 1.0}, where);
    if (mean.size() != 5 || diag.size() != 5) throw ConfigError(where + ": prior_mean and prior_cov_diag need 5 entries");
    for (double d : diag) {
      if (!(d > 0.0)) throw ConfigError(where + ".prior_cov_diag: entries must be positive");
    }
    if (!(cfg.ct.motion.T > 0.0)) throw ConfigError(where + ".T: must be positive");
    if (!(cfg.ct.motion.q_v > 0.0) || !(cfg.ct.motion.q_omega > 0.0)) {
      throw ConfigError(where + ": q_v and q_omega must be positive");
    }
    cfg.ct.prior_mean = to_vector(mean);
    cfg.ct.prior_cov = to_vector(diag).asDiagonal();
    if (j.contains("sensors")) {
      parse_sensors(j.at("sensors"), cfg);
    } else {
      cfg.ct.sensors = BearingsSensorConfig::two_sensors();
      cfg.sensor_overrides.clear();
    }
  } else if (type == "linear") {
    reject_unknown(j, {"type", "horizon", "state_dim", "meas_dim", "model_seed"}, where);
    cfg.model = ModelKind::Linear;
    cfg.horizon = get_or<Index>(j, "horizon", 50, where);
    cfg.linear.state_dim = get_or<Index>(j, "state_dim", 4, where);
    cfg.linear.meas_dim = get_or<Index>(j, "meas_dim", 2, where);
    cfg.linear.model_seed = get_or<std::uint64_t>(j, "model_seed", 7, where);
    if (cfg.linear.state_dim < 1 || cfg.linear.meas_dim < 1) throw ConfigError(where + ": dimensions must be >= 1");
  } else {
    throw ConfigError(where + ".type: expected 'coordinated_turn' or 'linear', got '" + type + "'");
  }
  if (cfg.horizon < 2) throw ConfigError(where + ".horizon: must be >= 2");
  cfg.ct.horizon = cfg.horizon;
}

inline const std::set<std::string>& smoother_keys() {
  static const std::set<std::string> keys{"variant",      "label",          "max_iterations", "tolerance",
                                          "inner_iterations", "sigma_points", "kappa",          "line_search",
                                          "lambda0",      "nu",             "lambda_max",     "covariance_form"};
  return keys;
}

// Applies the keys present in `j` on top of `cfg`.
inline void apply_smoother_settings(const json& j, SmootherConfig& cfg, const std::string& where) {
  cfg.max_iterations = get_or<int>(j, "max_iterations", cfg.max_iterations, where);
  cfg.tolerance = get_number(j, "tolerance", cfg.tolerance, where);
  cfg.inner_iterations = get_or<int>(j, "inner_iterations", cfg.inner_iterations, where);
  if (j.contains("sigma_points")) {
    const auto rule = get_or<std::string>(j, "sigma_points", "cubature", where);
    if (rule == "cubature") {
      cfg.scheme.rule = SigmaRule::Cubature;
    } else if (rule == "unscented") {
      cfg.scheme.rule = SigmaRule::Unscented;
    } else {
      throw ConfigError(where + ".sigma_points: expected 'cubature' or 'unscented'");
    }
  }
  if (j.contains("kappa")) {
    cfg.scheme.kappa = j.at("kappa").is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                : get_number(j, "kappa", 0.0, where);
  }
  if (j.contains("line_search")) {
    const json& ls = j.at("line_search");
    const std::string lw = where + ".line_search";
    reject_unknown(ls, {"kind", "grid_points", "c1", "shrink", "max_backtracks"}, lw);
    if (ls.contains("kind")) {
      const auto kind = get_or<std::string>(ls, "kind", "grid", lw);
      if (kind == "grid") {
        cfg.line_search.kind = LineSearchKind::Grid;
      } else if (kind == "armijo") {
        cfg.line_search.kind = LineSearchKind::Armijo;
      } else {
        throw ConfigError(lw + ".kind: expected 'grid' or 'armijo'");
      }
    }
    cfg.line_search.grid_points = get_or<int>(ls, "grid_points", cfg.line_search.grid_points, lw);
    cfg.line_search.armijo_c1 = get_number(ls, "c1", cfg.line_search.armijo_c1, lw);
    cfg.line_search.armijo_shrink = get_number(ls, "shrink", cfg.line_search.armijo_shrink, lw);
    cfg.line_search.armijo_max_backtracks = get_or<int>(ls, "max_backtracks", cfg.line_search.armijo_max_backtracks, lw);
  }
  cfg.lambda0 = get_number(j, "lambda0", cfg.lambda0, where);
  cfg.nu = get_number(j, "nu", cfg.nu, where);
  cfg.lambda_max = get_number(j, "lambda_max", cfg.lambda_max, where);
  if (j.contains("covariance_form")) {
    const auto form = get_or<std::string>(j, "covariance_form", "standard", where);
    if (form == "standard") {
      cfg.covariance_form = CovarianceForm::Standard;
    } else if (form == "joseph") {
      cfg.covariance_form = CovarianceForm::Joseph;
    } else {
      throw ConfigError(where + ".covariance_form: expected 'standard' or 'joseph'");
    }
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

inline std::vector<SmootherEntry> parse_smoothers(const json& root) {
  SmootherConfig defaults;
  if (root.contains("smoother_defaults")) {
    const json& d = root.at("smoother_defaults");
    std::set<std::string> keys = smoother_keys();
    keys.erase("variant");
    keys.erase("label");
    reject_unknown(d, keys, "smoother_defaults");
    apply_smoother_settings(d, defaults, "smoother_defaults");
  }
  std::vector<SmootherEntry> out;
  auto add = [&](const std::string& variant, const json* settings, std::string label, const std::string& where) {
    SmootherConfig cfg = defaults;
    try {
      const SmootherConfig kind = SmootherConfig::from_name(variant);
      cfg.linearization = kind.linearization;
      cfg.safeguard = kind.safeguard;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + ": " + e.what());
    }
    if (settings) apply_smoother_settings(*settings, cfg, where);
    if (label.empty()) label = variant;
    for (const auto& e : out) {
      if (e.label == label) throw ConfigError(where + ": duplicate smoother label '" + label + "'");
    }
    out.push_back({label, cfg});
  };
  if (!root.contains("smoothers")) {
    for (const auto& name : smoother_variants()) add(name, nullptr, "", "smoothers");
    return out;
  }
  const json& list = root.at("smoothers");
  if (!list.is_array() || list.empty()) throw ConfigError("smoothers: expected a non-empty array");
  for (std::size_t i = 0; i < list.size(); ++i) {
    const std::string where = "smoothers[" + std::to_string(i) + "]";
    const json& item = list[i];
    if (item.is_string()) {
      add(item.get<std::string>(), nullptr, "", where);
    } else {
      reject_unknown(item, smoother_keys(), where);
      if (!item.contains("variant")) throw ConfigError(where + ": 'variant' is required");
      add(get_or<std::string>(item, "variant", "", where), &item, get_or<std::string>(item, "label", "", where), where);
    }
  }
  for (const auto& e : out) {
    for (char c : e.label) {
      if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) {
        throw ConfigError("smoothers: label '" + e.label + "' may only contain letters, digits, '-', '_' and '.'");
      }
    }
  }
  return out;
}

}  // namespace detail

/// Parses a configuration document. Throws ConfigError on any problem.
inline ExperimentConfig parse_config(const json& root) {
  detail::reject_unknown(root, {"model", "trials", "seed", "initialization", "smoother_defaults", "smoothers",
                                "metrics", "output_dir"},
                         "config");
  ExperimentConfig cfg;
  if (root.contains("model")) {
    detail::parse_model(root.at("model"), cfg);
  } else {
    cfg.ct.horizon = cfg.horizon;
  }
  detail::apply_overrides(cfg);
  cfg.trials = detail::get_or<int>(root, "trials", 100, "config");
  if (cfg.trials < 1) throw ConfigError("config.trials: must be >= 1");
  cfg.seed = detail::get_or<std::uint64_t>(root, "seed", 0, "config");
  const auto init = detail::get_or<std::string>(root, "initialization", "non_iterative", "config");
  if (init == "non_iterative") {
    cfg.initialization = InitKind::NonIterative;
  } else if (init == "fixed_zero") {
    cfg.initialization = InitKind::FixedZero;
  } else if (init == "prior_mean") {
    cfg.initialization = InitKind::PriorMean;
  } else {
    throw ConfigError("config.initialization: expected 'non_iterative', 'fixed_zero' or 'prior_mean'");
  }
  cfg.smoothers = detail::parse_smoothers(root);
  if (root.contains("metrics")) {
    const json& m = root.at("metrics");
    detail::reject_unknown(m, {"rmse_components", "nees_components", "write_trajectories"}, "metrics");
    cfg.rmse_components = detail::get_indices(m, "rmse_components", cfg.rmse_components, "metrics");
    cfg.nees_components = detail::get_indices(m, "nees_components", cfg.nees_components, "metrics");
    cfg.write_trajectories = detail::get_or<bool>(m, "write_trajectories", true, "metrics");
  }
  if (cfg.model == ModelKind::Linear && !(root.contains("metrics") && root.at("metrics").contains("rmse_components"))) {
    cfg.rmse_components.clear();
    for (Index i = 0; i < cfg.linear.state_dim; ++i) cfg.rmse_components.push_back(i);
  }
  if (cfg.rmse_components.empty()) throw ConfigError("metrics.rmse_components: must not be empty");
  for (const auto* comps : {&cfg.rmse_components, &cfg.nees_components}) {
    for (Index c : *comps) {
      if (c >= cfg.state_dim()) throw ConfigError("metrics: component index " + std::to_string(c) + " out of range");
    }
  }
  cfg.output_dir = detail::get_or<std::string>(root, "output_dir", "results", "config");
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  json root;
  try {
    root = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return parse_config(root);
}

namespace detail {

inline json smoother_to_json(const SmootherEntry& e) {
  const SmootherConfig& c = e.config;
  json j;
  j["label"] = e.label;
  j["variant"] = c.name();
  j["max_iterations"] = c.max_iterations;
  j["tolerance"] = c.tolerance;
  j["inner_iterations"] = c.inner_iterations;
  j["sigma_points"] = c.scheme.rule == SigmaRule::Cubature ? "cubature" : "unscented";
  j["kappa"] = std::isnan(c.scheme.kappa) ? json(nullptr) : json(c.scheme.kappa);
  j["line_search"] = {{"kind", c.line_search.kind == LineSearchKind::Grid ? "grid" : "armijo"},
                      {"grid_points", c.line_search.grid_points},
                      {"c1", c.line_search.armijo_c1},
                      {"shrink", c.line_search.armijo_shrink},
                      {"max_backtracks", c.line_search.armijo_max_backtracks}};
  j["lambda0"] = c.lambda0;
  j["nu"] = c.nu;
  j["lambda_max"] = c.lambda_max;
  j["covariance_form"] = c.covariance_form == CovarianceForm::Standard ? "standard" : "joseph";
  return j;
}

}  // namespace detail

/// Fully resolved configuration, accepted back by parse_config.
inline json to_json(const ExperimentConfig& cfg) {
  json model;
  if (cfg.model == ModelKind::CoordinatedTurn) {
    json positions = json::array();
    for (const auto& p : cfg.ct.sensors.positions) positions.push_back({p.x(), p.y()});
    json overrides = json::array();
    for (const auto& o : cfg.sensor_overrides) overrides.push_back(o);
    model = {{"type", "coordinated_turn"},
             {"horizon", cfg.horizon},
             {"T", cfg.ct.motion.T},
             {"q_v", cfg.ct.motion.q_v},
             {"q_omega", cfg.ct.motion.q_omega},
             {"prior_mean", detail::from_vector(cfg.ct.prior_mean)},
             {"prior_cov_diag", detail::from_vector(cfg.ct.prior_cov.diagonal())},
             {"sensors",
              {{"positions", positions},
               {"stds", cfg.ct.sensors.stds},
               {"periodic_overrides", overrides},
               {"wrap_angles", cfg.ct.wrap_angles}}}};
  } else {
    model = {{"type", "linear"},
             {"horizon", cfg.horizon},
             {"state_dim", cfg.linear.state_dim},
             {"meas_dim", cfg.linear.meas_dim},
             {"model_seed", cfg.linear.model_seed}};
  }
  json smoothers = json::array();
  for (const auto& e : cfg.smoothers) smoothers.push_back(detail::smoother_to_json(e));
  const char* init = cfg.initialization == InitKind::NonIterative ? "non_iterative"
                     : cfg.initialization == InitKind::FixedZero  ? "fixed_zero"
                                                                  : "prior_mean";
  return {{"model", model},
          {"trials", cfg.trials},
          {"seed", cfg.seed},
          {"initialization", init},
          {"smoothers", smoothers},
          {"metrics",
           {{"rmse_components", cfg.rmse_components},
            {"nees_components", cfg.nees_components},
            {"write_trajectories", cfg.write_trajectories}}},
          {"output_dir", cfg.output_dir}};
}

}  // namespace itersmooth::harness
