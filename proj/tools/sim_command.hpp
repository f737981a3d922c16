#pragma once

#include <cstdint>
#include <optional>
#include <string>

namespace ctmaas::cli {

/// Runs a scenario file and writes the report. Returns a process exit code.
int run_scenario(const std::string& scenario_path, const std::string& out_path, std::optional<std::uint64_t> seed);

}  // namespace ctmaas::cli
