#pragma once

#include <iosfwd>

namespace lamatch::cli {

enum ExitCode : int { kOk = 0, kAssertion = 1, kUsage = 2, kData = 3 };

// Entry point of the lamatch tool. Reports go to `out`, diagnostics to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace lamatch::cli
