#pragma once

#include <stdexcept>
#include <string>

namespace fcca {

// Base of every error raised by the library. The CLI maps the concrete
// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid run configuration or option value (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or unusable input data (exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

// The pipeline cannot proceed, e.g. no query points survive selection (exit code 4).
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

}  // namespace fcca
