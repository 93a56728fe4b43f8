#pragma once

#include <stdexcept>
#include <string>

namespace yieldnet {

/// Malformed file contents (bad magic, truncation, version mismatch).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Data violates an invariant (non-finite values, negative yield, ...).
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Bad configuration (empty split, invalid ranges, unknown keys).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Filesystem / checkpoint trouble.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient during training.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Operation not available in the active tokenization mode.
struct UnsupportedModeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace yieldnet
