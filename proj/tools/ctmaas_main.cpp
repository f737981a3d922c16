#include <atomic>
#include <chrono>
#include <csignal>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "ctmaas/api.hpp"
#include "ctmaas/platform.hpp"
#include "sim_command.hpp"

namespace {

std::atomic<bool> g_stop{false};
void on_signal(int) { g_stop = true; }

int serve(const std::string& graph_path, const std::string& signals_path, const std::string& config_path,
          std::optional<int> port) {
  using namespace ctmaas;
  auto config = config_path.empty() ? PlatformConfig{} : load_config_file(config_path);
  if (port) config.port = *port;
  auto graph = road::load_graph_file(graph_path);
  std::vector<signal::SignalPlan> plans;
  if (!signals_path.empty()) plans = signal::load_signal_plans_file(signals_path);
  fleet::Gazetteer gazetteer;
  if (!config.gazetteer_path.empty()) gazetteer = fleet::load_gazetteer_file(config.gazetteer_path);

  Platform platform(std::move(graph), std::move(plans), config, std::move(gazetteer));
  if (platform.store().recovery_error())
    std::cerr << "log recovery stopped early: " << *platform.store().recovery_error() << "\n";
  api::Server server(platform);
  const int bound = server.bind("0.0.0.0", config.port);
  if (bound < 0) {
    std::cerr << "cannot bind port " << config.port << "\n";
    return 1;
  }
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  server.start();
  std::cerr << "ctmaas listening on port " << bound << "\n";
  while (!g_stop) {
    std::this_thread::sleep_for(std::chrono::seconds(1));
    platform.tick(platform.now());
  }
  platform.hub().close();
  server.stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Connected traffic management platform"};
  app.require_subcommand(1);

  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP API");
  std::string graph, signals, config;
  std::optional<int> port;
  serve_cmd->add_option("--graph", graph, "Road graph JSON")->required()->check(CLI::ExistingFile);
  serve_cmd->add_option("--signals", signals, "Signal plan JSON")->check(CLI::ExistingFile);
  serve_cmd->add_option("--config", config, "TOML configuration")->check(CLI::ExistingFile);
  serve_cmd->add_option("--port", port, "Listen port (overrides the config)");

  auto* sim_cmd = app.add_subcommand("sim", "Simulator");
  sim_cmd->require_subcommand(1);
  auto* run_cmd = sim_cmd->add_subcommand("run", "Run a scenario and write a report");
  std::string scenario, out = "report.json";
  std::optional<std::uint64_t> seed;
  run_cmd->add_option("scenario", scenario, "Scenario JSON file")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--out", out, "Report path");
  run_cmd->add_option("--seed", seed, "Override the scenario seed");

  CLI11_PARSE(app, argc, argv);
  try {
    if (serve_cmd->parsed()) return serve(graph, signals, config, port);
    return ctmaas::cli::run_scenario(scenario, out, seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
