#include "sim_command.hpp"

#include <chrono>
#include <fstream>
#include <iostream>

#include "ctmaas/sim.hpp"

namespace ctmaas::cli {

int run_scenario(const std::string& scenario_path, const std::string& out_path, std::optional<std::uint64_t> seed) {
  try {
    auto scenario = sim::load_scenario_file(scenario_path);
    if (seed) scenario.seed = *seed;
    const auto started = std::chrono::steady_clock::now();
    const auto report = sim::run(std::move(scenario));
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    std::ofstream out(out_path);
    if (!out) {
      std::cerr << "cannot write " << out_path << "\n";
      return 1;
    }
    out << sim::to_json(report).dump(2) << "\n";
    std::size_t arrived = 0;
    for (const auto& v : report.vehicles) arrived += v.arrival_s.has_value();
    std::cerr << report.scenario << ": " << arrived << "/" << report.vehicles.size() << " vehicles arrived, "
              << report.messages.size() << " messages, " << wall << " s wall clock\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace ctmaas::cli
