#pragma once

#include <iosfwd>

namespace icvseg::cli {

enum ExitCode : int { ok = 0, usage = 1, data = 2, numeric = 3 };

/// Runs `icvseg <subcommand> ...` and returns the process exit code.
/// Subcommands: phantom, train, segment, evaluate.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace icvseg::cli
