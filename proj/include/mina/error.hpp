#pragma once

#include <stdexcept>
#include <string>

namespace mina {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input data (record files, checkpoints).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values or argument preconditions.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor dimensions that do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mina
