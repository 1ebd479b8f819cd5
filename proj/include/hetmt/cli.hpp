#pragma once

#include <iosfwd>

namespace hetmt::cli {

/// Runs one subcommand (genphantom | train | infer | eval | calibrate | report).
/// Returns 0 on success, 1 on a usage error, 2 on a runtime error.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hetmt::cli
