#pragma once

#include <stdexcept>
#include <string>

namespace tornet {

/// Inconsistent shapes, bad hyperparameters, invalid configuration files.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or unusable input data (audio, manifests, empty clips).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary file layout violations (checkpoints, feature cache, WAV headers).
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

/// A non-finite value was produced by a numeric op.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tornet
