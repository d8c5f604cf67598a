#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "calm/harness.hpp"

#ifndef CALM_TEST_BIN_DIR
#define CALM_TEST_BIN_DIR "."
#endif

namespace fs = std::filesystem;
using namespace calm;

namespace {

void print_summary(const std::vector<SummaryRow>& rows) {
  std::printf("%-10s %-18s %-12s %-10s %6s %10s %10s\n", "regime", "factor", "value", "method", "ok", "mean_rmse",
              "se");
  for (const auto& r : rows)
    std::printf("%-10s %-18s %-12s %-10s %3d/%-2d %10.4f %10.4f\n", r.regime.c_str(), r.factor.c_str(),
                r.factor_value.c_str(), r.method.c_str(), r.n_ok, r.n_reps, r.mean_rmse, r.se_rmse);
}

void announce(const Setting& s) {
  std::cerr << "[calm] " << to_string(s.regime()) << " " << s.factor << "=" << s.factor_value << " ("
            << s.methods.size() << " methods x " << s.n_reps << " reps)" << std::endl;
}

int run_binary(const fs::path& bin, const std::string& args) {
  if (!fs::exists(bin)) {
    std::cerr << "test binary not found: " << bin << " (build the test targets first)\n";
    return 2;
  }
  const std::string cmd = "\"" + bin.string() + "\" " + args;
  std::cerr << "[calm] " << cmd << std::endl;
  const int rc = std::system(cmd.c_str());
  return rc == 0 ? 0 : 1;
}

// Property checks that finish in seconds to a few minutes.
constexpr const char* kInvariantChecks =
    "pseudo_outcome_unbiased,cmo_variance_optimal,lasso_oracle,gradients,mmd_identities,linear_equivalence,"
    "cross_fitting_audit,determinism";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"calm: CATE estimation with observational-data borrowing"};
  app.require_subcommand(1);

  // sweep
  auto* sweep = app.add_subcommand("sweep", "vary one factor over a value list");
  std::string regime = "baseline", factor, out_dir, sweep_config;
  std::vector<std::string> values, methods;
  std::optional<int> reps;
  std::uint64_t seed = 1;
  int jobs = 1;
  sweep->add_option("--config", sweep_config, "sweep JSON (regime, dgp, methods, n_reps, base_seed, options, factor, values)");
  sweep->add_option("--regime", regime, "baseline | latent | ihdp")->check(CLI::IsMember({"baseline", "latent", "ihdp"}));
  sweep->add_option("--factor", factor, "config field to vary (e.g. sigma_v2, omega, n_r)");
  sweep->add_option("--values", values, "comma-separated values")->delimiter(',');
  sweep->add_option("--methods", methods, "comma-separated methods (default: all)")->delimiter(',');
  sweep->add_option("--reps", reps, "replicates per setting")->check(CLI::PositiveNumber);
  sweep->add_option("--seed", seed, "base seed");
  sweep->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  sweep->add_option("--out", out_dir, "output directory")->required();

  // run-one
  auto* one = app.add_subcommand("run-one", "run one fully specified setting (or a one-setting manifest)");
  std::string config;
  one->add_option("--config", config, "setting JSON or manifest.json")->required()->check(CLI::ExistingFile);
  one->add_option("--out", out_dir, "output directory")->required();
  one->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);

  // verify
  auto* verify = app.add_subcommand("verify", "run a test suite");
  std::string suite;
  verify->add_option("--suite", suite, "unit | invariants | acceptance")
      ->required()
      ->check(CLI::IsMember({"unit", "invariants", "acceptance"}));
  verify->add_option("--jobs", jobs, "worker threads for acceptance runs")->check(CLI::PositiveNumber);
  std::string artifacts = (fs::temp_directory_path() / "calm_acceptance").string();
  verify->add_option("--out", artifacts, "directory for acceptance run artifacts");

  // paper-grid
  auto* grid = app.add_subcommand("paper-grid", "write (and optionally run) the standard experimental grid");
  bool run_grid = false;
  grid->add_option("--out", out_dir, "output directory")->required();
  grid->add_flag("--run", run_grid, "execute the sweeps, not just write their configs");
  grid->add_option("--reps", reps, "override replicate counts")->check(CLI::PositiveNumber);
  grid->add_option("--seed", seed, "base seed");
  grid->add_option("--methods", methods, "comma-separated methods (default: all)")->delimiter(',');
  grid->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sweep) {
      SweepSpec spec;
      if (!sweep_config.empty()) {
        std::ifstream f(sweep_config);
        if (!f) throw ConfigError("cannot read '" + sweep_config + "'");
        spec = sweep_from_json(json::parse(f));
        if (!methods.empty()) spec.base.methods = parse_method_list(methods);
        if (reps) spec.base.n_reps = *reps;
        if (sweep->count("--seed")) spec.base.base_seed = seed;
      } else {
        if (factor.empty() || values.empty()) throw ConfigError("sweep needs --factor and --values (or --config)");
        spec = make_sweep(parse_regime(regime), factor, values,
                          methods.empty() ? default_methods() : parse_method_list(methods), reps, seed);
      }
      const auto res = run_sweep(spec, out_dir, jobs, announce);
      print_summary(res.summary);
      std::cerr << "[calm] wrote " << (fs::path(out_dir) / "records.csv").string() << std::endl;
      return 0;
    }
    if (*one) {
      const Setting s = load_setting_file(config);
      const auto res = run_and_write({s}, out_dir, jobs, setting_to_json(s), announce);
      print_summary(res.summary);
      return 0;
    }
    if (*verify) {
      const fs::path dir = CALM_TEST_BIN_DIR;
      if (suite == "unit") {
        int rc = 0;
        for (const char* t : {"core_data_test", "linmod_test", "dgp_test", "neural_test", "alignment_test",
                              "estimators_test", "harness_test"})
          rc |= run_binary(dir / t, "--gtest_brief=1");
        return rc;
      }
      const std::string common = "--out \"" + artifacts + "\" --jobs " + std::to_string(jobs);
      if (suite == "invariants") return run_binary(dir / "acceptance_test", std::string("--only ") + kInvariantChecks + " " + common);
      return run_binary(dir / "acceptance_test", common);
    }
    if (*grid) {
      const auto entries =
          standard_grid(reps, seed, methods.empty() ? default_methods() : parse_method_list(methods));
      fs::create_directories(fs::path(out_dir) / "configs");
      json index = json::array();
      std::size_t total = 0;
      for (const auto& e : entries) {
        const auto settings = e.sweep.settings();
        total += settings.size();
        const fs::path cfg = fs::path(out_dir) / "configs" / (e.name + ".json");
        std::ofstream(cfg) << sweep_to_json(e.sweep).dump(2) << '\n';
        index.push_back({{"name", e.name},
                         {"regime", to_string(e.sweep.base.regime())},
                         {"factor", e.sweep.factor},
                         {"values", e.sweep.values},
                         {"config", cfg.string()}});
      }
      std::ofstream(fs::path(out_dir) / "grid.json")
          << json{{"version", kCalmVersion}, {"settings", total}, {"sweeps", index}}.dump(2) << '\n';
      std::cerr << "[calm] " << entries.size() << " sweeps, " << total << " settings written to " << out_dir
                << std::endl;
      if (run_grid)
        for (const auto& e : entries) run_sweep(e.sweep, fs::path(out_dir) / e.name, jobs, announce);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
