#pragma once

#include <stdexcept>
#include <string>

namespace cnd {

/// Invalid configuration value or combination of values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Tensor or vector dimensions do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent on-disk data (corpus container, checkpoint).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An object is used before it is ready (untrained model, frozen bank, ...).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Required inputs are missing (e.g. no generated image for a test sample).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training diverged or a forward pass produced non-finite values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cnd
