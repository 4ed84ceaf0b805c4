#pragma once

#include <stdexcept>
#include <string>

namespace sslseg {

// Exit-code mapping for the CLI: ConfigError -> 2, IncompleteGridError -> 3,
// NumericError -> 4, anything else -> 1.

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Zero-variance (or otherwise degenerate) input to an operation that needs
// spread, e.g. normalization.
struct DegenerateInputError : ConfigError {
  explicit DegenerateInputError(const std::string& msg) : ConfigError(msg) {}
};

struct ChecksumError : std::runtime_error {
  explicit ChecksumError(const std::string& msg) : std::runtime_error(msg) {}
};

// Weight transfer between architecturally incompatible models.
struct IncompatibleError : std::runtime_error {
  explicit IncompatibleError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IncompleteGridError : std::runtime_error {
  explicit IncompleteGridError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace sslseg
