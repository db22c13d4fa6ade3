#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace crowdx {

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

/// Parses `args` (without the program name) and runs the subcommand.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Runs a subcommand from a complete run configuration, the same object every
/// run writes to run_config.json. `replay` is this function applied to a file.
int execute(const nlohmann::json& run_config, std::ostream& out, std::ostream& err);

}  // namespace crowdx
