#pragma once

#include <stdexcept>
#include <string>

namespace attfuse {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A configuration value (layer setting, hyperparameter, flag) is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input data is malformed or out of range.
class DataError : public Error {
 public:
  using Error::Error;
};

/// An API was called in a state that does not permit it.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint, manifest or tensor file could not be loaded.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Training hit a numerical failure.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace attfuse
