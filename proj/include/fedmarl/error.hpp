#pragma once

#include <stdexcept>
#include <string>

namespace fedmarl {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or precondition violation on user-supplied values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A required input file (dataset, traces, policy artifact) is missing or corrupt.
class ArtifactError : public Error {
 public:
  using Error::Error;
};

// Shapes or layouts of two operands do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedmarl
