// Command-line front end for the Monte-Carlo smoother experiments.
//
//   itersmooth run --config cfg.json [--out dir] [--seed n] [--trials n] [--workers n]
//   itersmooth validate --config cfg.json
//   itersmooth list-smoothers
//
// Exit codes: 0 success, 2 configuration error, 3 I/O error.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "itersmooth/harness/runner.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

}  // namespace

int main(int argc, char** argv) {
  using namespace itersmooth;
  using namespace itersmooth::harness;

  CLI::App app{"Iterated Gaussian smoother experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> trials;
  unsigned workers = 0;

  auto* run = app.add_subcommand("run", "Run an experiment and write metrics, trajectories and a manifest");
  run->add_option("--config", config_path, "Experiment configuration (JSON)")->required();
  run->add_option("--out", out_dir, "Output directory (overrides output_dir)");
  run->add_option("--seed", seed, "Base seed (overrides seed)");
  run->add_option("--trials", trials, "Number of trials (overrides trials)");
  run->add_option("--workers", workers, "Worker threads, 0 for all cores")->capture_default_str();

  auto* validate = app.add_subcommand("validate", "Check a configuration without running it");
  validate->add_option("--config", config_path, "Experiment configuration (JSON)")->required();

  auto* list = app.add_subcommand("list-smoothers", "Print the available smoother variants");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  if (list->parsed()) {
    for (const auto& name : smoother_variants()) std::cout << name << '\n';
    return 0;
  }

  try {
    ExperimentConfig cfg = load_config(config_path);
    if (validate->parsed()) {
      std::cout << "config OK: " << cfg.smoothers.size() << " smoothers, " << cfg.trials << " trials\n";
      return 0;
    }
    if (seed) cfg.seed = *seed;
    if (trials) {
      if (*trials < 1) throw ConfigError("--trials must be >= 1");
      cfg.trials = *trials;
    }
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    const RunSummary summary = run_experiment(cfg, cfg.output_dir, workers);
    for (std::size_t i = 0; i < summary.rows.size(); ++i) {
      const auto& row = summary.rows[i];
      if (i + 1 < summary.rows.size() && summary.rows[i + 1].smoother == row.smoother) continue;
      std::cout << row.smoother << " iter " << row.iteration << ": rmse " << format_double(row.rmse_mean)
                << " +- " << format_double(row.rmse_se) << ", diverged " << format_double(row.diverged_fraction)
                << '\n';
    }
    std::cout << "wrote " << summary.metrics_path.string() << '\n';
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kExitIo;
  }
}
