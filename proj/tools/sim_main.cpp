#include <CLI11.hpp>

#include "sim_command.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Deterministic vehicle simulator"};
  app.require_subcommand(1);
  auto* run = app.add_subcommand("run", "Run a scenario and write a report");
  std::string scenario, out = "report.json";
  std::optional<std::uint64_t> seed;
  run->add_option("scenario", scenario, "Scenario JSON file")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out, "Report path");
  run->add_option("--seed", seed, "Override the scenario seed");
  CLI11_PARSE(app, argc, argv);
  return ctmaas::cli::run_scenario(scenario, out, seed);
}
