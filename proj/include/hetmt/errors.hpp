#pragma once

#include <stdexcept>
#include <string>

namespace hetmt {

/// Malformed or inconsistent file contents.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Filesystem failure; the message carries the offending path.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or precondition violation.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values encountered during a computation.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Phantom synthesis could not satisfy its geometric constraints.
struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace hetmt
