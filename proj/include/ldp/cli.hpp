#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ldp {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitIo = 3, kExitNumerical = 4 };

/// Runs `ldp <args...>` (args exclude the program name) and returns its exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ldp
