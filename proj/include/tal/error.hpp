#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tal {

/// Base of every error the library throws. `exit_code()` is the CLI status
/// the error maps to.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Bad configuration: shape mismatches, out-of-range parameters, unknown
/// enumerators.
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// A configuration the closed-form oracles do not cover.
class UnsupportedError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Non-finite value produced while evaluating a graph or training.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what, std::size_t node = npos)
      : Error(what), node_(node) {}
  int exit_code() const noexcept override { return 3; }
  /// Index of the graph node that produced the non-finite value, or npos.
  std::size_t node() const noexcept { return node_; }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  std::size_t node_;
};

/// Rate with an empty denominator (no clean-correct images).
class UndefinedRateError : public NumericError {
 public:
  using NumericError::NumericError;
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

/// Malformed weight/dataset file. Carries the byte offset of the fault.
class FormatError : public IoError {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : IoError(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace tal
