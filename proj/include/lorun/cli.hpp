#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace lorun {

/// Exit codes shared by every command.
enum ExitCode : int { kExitOk = 0, kExitVerifyFailed = 1, kExitConfig = 2, kExitRuntime = 3 };

/// Runs one command line (without the program name) and returns its exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lorun
