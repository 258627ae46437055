#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace bevfuse {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor or grid shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A value outside its documented domain (weights, severities, steps, ...).
class RangeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Raised by the trainer when the loss stops being finite.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what, std::int64_t offset = -1)
      : Error(offset >= 0 ? what + " (at byte offset " + std::to_string(offset) + ")" : what),
        offset_(offset) {}

  std::int64_t offset() const { return offset_; }

 private:
  std::int64_t offset_;
};

// Artifact produced under a different configuration than the one in use.
class HashMismatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace bevfuse
