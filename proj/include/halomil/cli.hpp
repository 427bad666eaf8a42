#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace halomil {

inline constexpr const char* kToolkitVersion = "0.1.0";

/// Runs one command line (without the program name). Errors are written to `err`
/// prefixed with "E:"; the return value is the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace halomil
