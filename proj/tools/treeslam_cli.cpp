// Command-line front end: simulate capture logs and replay them through the estimator.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "treeslam/config.hpp"
#include "treeslam/error.hpp"
#include "treeslam/runner.hpp"
#include "treeslam/simulator.hpp"

namespace
{

constexpr int kConfigError = 2;
constexpr int kDataError = 3;

int run_sim(const std::string & scenario_path, const std::string & out, const std::string & truth_out)
{
  treeslam::SimScenario scenario;
  try {
    scenario = treeslam::load_scenario(scenario_path);
  } catch (const treeslam::Error & e) {
    std::cerr << e.what() << '\n';
    return kConfigError;
  }
  const auto sim = treeslam::simulate(scenario);
  treeslam::write_text(out, treeslam::to_jsonl(sim.log));
  treeslam::write_text(truth_out, treeslam::to_jsonl(sim.truth));
  return 0;
}

int run_replay(
  const std::string & config_path, const std::string & log_path, const std::string & out,
  const std::string & truth_path, const std::string & metrics_path, bool print_tree, bool background)
{
  treeslam::ParameterServer config;
  try {
    config = treeslam::load_config(config_path);
    // Validate the configuration before touching the data.
    auto setup = treeslam::auto_setup(config);
    for (const auto & w : setup.warnings) {
      std::cerr << "warning: " << w << '\n';
    }
  } catch (const treeslam::Error & e) {
    std::cerr << e.what() << '\n';
    return kConfigError;
  }

  try {
    const auto log = treeslam::read_jsonl(log_path);
    std::vector<treeslam::CaptureRecord> truth;
    if (!truth_path.empty()) {
      truth = treeslam::read_jsonl(truth_path);
    }
    treeslam::RunOptions options;
    options.background_solve = background;
    const auto result = treeslam::run(config, log, options, truth_path.empty() ? nullptr : &truth);
    treeslam::write_text(out, treeslam::estimate_jsonl(result));
    if (result.metrics && !metrics_path.empty()) {
      treeslam::write_text(metrics_path, result.metrics->to_json().dump(2) + "\n");
    }
    if (print_tree) {
      std::cout << treeslam::print_tree(result.problem->tree());
    }
  } catch (const treeslam::Error & e) {
    std::cerr << e.what() << '\n';
    return kDataError;
  }
  return 0;
}

}  // namespace

int main(int argc, char ** argv)
{
  CLI::App app{"2D factor-graph estimation: simulate and replay capture logs"};
  app.require_subcommand(1);

  auto * sim = app.add_subcommand("sim", "simulate a scenario into capture and truth logs");
  std::string scenario, sim_out, sim_truth;
  sim->add_option("--scenario", scenario, "scenario YAML")->required();
  sim->add_option("--out", sim_out, "capture log (JSONL)")->required();
  sim->add_option("--truth", sim_truth, "ground-truth log (JSONL)")->required();

  auto * run = app.add_subcommand("run", "replay a capture log through a configured problem");
  std::string config, log, out, truth, metrics;
  bool print_tree = false, background = false;
  run->add_option("--config", config, "problem YAML")->required();
  run->add_option("--log", log, "capture log (JSONL)")->required();
  run->add_option("--out", out, "estimate output (JSONL)")->required();
  run->add_option("--truth", truth, "ground-truth log for metrics");
  run->add_option("--metrics", metrics, "metrics output (JSON)");
  run->add_flag("--print-tree", print_tree, "print the final tree");
  run->add_flag("--background-solve", background, "solve on a second thread");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sim) {
      return run_sim(scenario, sim_out, sim_truth);
    }
    return run_replay(config, log, out, truth, metrics, print_tree, background);
  } catch (const std::exception & e) {
    std::cerr << e.what() << '\n';
    return 1;
  }
}
