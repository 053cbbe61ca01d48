#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace coarsegrain::cli {

/// Runs the command line `args` (without the program name). Normal output goes to `out`,
/// diagnostics to `err`. Returns the process exit status.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Worker count: the flag value if positive, else COARSEGRAIN_JOBS, else the hardware count.
unsigned resolve_jobs(int flag_value);

}  // namespace coarsegrain::cli
