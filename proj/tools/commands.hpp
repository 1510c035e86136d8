#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lens::cli {

enum ExitCode : int { kOk = 0, kVerificationFailure = 1, kUsageError = 2, kDivergence = 3 };

/// Runs one CLI invocation; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Sets the log level from LENS_LOG (trace, debug, info, warn, err, critical, off).
void configure_logging();

}  // namespace lens::cli
