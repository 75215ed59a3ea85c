#pragma once

#include <stdexcept>
#include <string>

namespace setcon {

/// Operand shapes do not fit the operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A scalar argument is outside its admissible range.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Two trees (parameters, gradients, moments) disagree in names or shapes,
/// or a required entry is missing.
class StructuralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN or Inf where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk container. Carries the byte position that failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t byte_position)
      : std::runtime_error(what + " (at byte " + std::to_string(byte_position) + ")"),
        byte_position_(byte_position) {}

  std::size_t byte_position() const noexcept { return byte_position_; }

 private:
  std::size_t byte_position_;
};

/// Invalid or unknown configuration key. `key()` is the dotted path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(key + ": " + what), key_(std::move(key)) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

}  // namespace setcon
