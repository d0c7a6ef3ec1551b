#pragma once

#include <stdexcept>
#include <string>

namespace smile {

/// Operand shapes are incompatible with the requested operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or infinity appeared at an operation boundary.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A persisted file (dataset, checkpoint) is malformed or truncated.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A configuration field is missing or out of range.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, std::string reason)
      : std::invalid_argument(field + ": " + reason),
        field_(std::move(field)),
        reason_(std::move(reason)) {}

  const std::string& field() const noexcept { return field_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::string field_;
  std::string reason_;
};

}  // namespace smile
