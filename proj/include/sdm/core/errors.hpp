#pragma once

#include <stdexcept>
#include <string>

namespace sdm {

/// Tensor or parameter shapes do not fit together.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf produced, or a numeric procedure diverged.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File was readable but its content is malformed.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

/// Geometric or supervisory input is degenerate (singular, collinear, empty).
class DegenerateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user-supplied option or configuration value.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace sdm
