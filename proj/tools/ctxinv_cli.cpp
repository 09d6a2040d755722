// Command-line runner: run, verify and sweep over a flat key = value config.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "ctxinv/ctxinv.hpp"

namespace {

using namespace ctxinv;

struct Common {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<long long> seed;
  std::optional<std::string> experiment;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "config file (key = value lines); defaults apply when omitted");
  cmd->add_option("--out", c.out_dir, "output directory");
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--experiment", c.experiment, "overrides the config experiment");
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg;
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw ConfigError("cannot open config file '" + c.config_path + "'");
    cfg = parse_config(in);
  }
  if (c.seed) apply_setting(cfg, "seed", std::to_string(*c.seed));
  if (c.experiment) apply_setting(cfg, "experiment", *c.experiment);
  return cfg;
}

int cmd_run(const Common& c) {
  const ExperimentConfig cfg = load(c);
  const auto outcome = run_experiment(cfg, c.out_dir);
  if (outcome.result) {
    const auto& r = *outcome.result;
    std::cout << "experiment " << r.experiment;
    if (r.eta) std::cout << "  eta " << format_double(*r.eta) << (r.eta_searched ? " (searched)" : "");
    std::cout << '\n';
    print_checks(std::cout, r);
    std::cout << (r.pass() ? "PASS" : "FAIL") << "  artifacts in " << c.out_dir << '\n';
  } else {
    std::cerr << outcome.message << '\n';
  }
  return outcome.exit_code;
}

int cmd_verify(const Common& c, std::optional<double> perturb) {
  const ExperimentConfig cfg = load(c);
  const auto report = verify(cfg, perturb);
  report.print(std::cout);
  return report.pass() ? kExitPass : kExitPropertyFailure;
}

int cmd_sweep(const Common& c, int jobs) {
  const ExperimentConfig cfg = load(c);
  const auto outcome = run_sweep(cfg, c.out_dir, jobs, &std::cout);
  std::cout << outcome.runs.size() << " runs; aggregate in " << c.out_dir << "/aggregate.csv\n";
  return outcome.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctxinv: one-layer transformer lab for context-parametric inversion"};
  app.require_subcommand(1);

  Common run_opts, verify_opts, sweep_opts;
  auto* run = app.add_subcommand("run", "run one experiment and write trace.csv, summary.json, plots.svg");
  add_common(run, run_opts);

  auto* ver = app.add_subcommand("verify", "run the oracle battery and print a pass/fail table");
  add_common(ver, verify_opts);
  std::optional<double> perturb;
  ver->add_option("--perturb-wv", perturb, "add N(0, x^2) noise to the pretrained W_V first");

  auto* swp = app.add_subcommand("sweep", "run every grid point of the config's sweep.<key> lines");
  add_common(swp, sweep_opts);
  int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  swp->add_option("--jobs", jobs, "parallel runs")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfigError;
  }

  try {
    if (*run) return cmd_run(run_opts);
    if (*ver) return cmd_verify(verify_opts, perturb);
    return cmd_sweep(sweep_opts, jobs);
  } catch (const ParamError& e) {
    std::cerr << e.what() << '\n';
    return kExitConfigError;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const DatasetError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const DivergenceError& e) {
    std::cerr << "numerical divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitPropertyFailure;
  }
}
