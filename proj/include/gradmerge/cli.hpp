#pragma once

#include <iosfwd>

namespace gradmerge {

// Command-line entry point. Machine output goes to `out`; log lines and error
// messages go to `err`. Returns the process exit status.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gradmerge
