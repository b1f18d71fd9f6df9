#pragma once

#include <stdexcept>
#include <string>

namespace aelab {

/// Incompatible tensor shapes. The message names every shape involved.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke a documented precondition (non-scalar loss, missing
/// gradient, timestep out of range, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid model spec, training config or dataset layout.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem or decode failure; carries the offending path in the message.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training diverged (non-finite loss); the message names epoch and batch.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Rating-service request errors, mapped to HTTP 400 / 404 / 409.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConflictError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace aelab
