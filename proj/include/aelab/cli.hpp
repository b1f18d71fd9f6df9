#pragma once

#include <iosfwd>

namespace aelab {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Runs one `aelab` subcommand. Normal output goes to `out`, usage text and
/// errors to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace aelab
