#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace exgn {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitData = 3, kExitNumeric = 4 };

/// Runs one CLI invocation; `args` excludes the program name. Errors are
/// reported on `err` and mapped to an exit code, never thrown.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Worker cap from EXGN_THREADS (default 1). Throws UsageError when the
/// variable is set but is not a positive integer.
int worker_threads();

}  // namespace exgn
