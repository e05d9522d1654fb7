#pragma once

#include <stdexcept>
#include <string>

namespace eyeseg {

// Tensor shapes or configuration sizes that do not fit together.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// NaN or Inf reached a place where only finite values are allowed.
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed, truncated or out-of-range file content.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// An operation was invoked in a state that does not support it
// (backward on a non-scalar, eval-mode batch norm without statistics, ...).
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace eyeseg
