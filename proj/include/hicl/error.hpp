#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hicl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument is outside its admissible range (temperature, margin, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced or supplied where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class RoutingError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Bad or inconsistent input data (labels out of range, malformed files).
class DataError : public Error {
 public:
  using Error::Error;
};

class FormatError : public DataError {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : DataError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace hicl
