#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace attnmod {

// Base for every error the library raises. Callers that only care about
// "something went wrong" catch this; the subclasses exist so the CLI can map
// failures onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Raised by the engine when an activation turns NaN/Inf.
class NonFiniteError : public NumericError {
 public:
  NonFiniteError(std::size_t layer, const std::string& what)
      : NumericError("non-finite activation in layer " + std::to_string(layer) + ": " + what),
        layer_(layer) {}

  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

class ContextOverflowError : public Error {
 public:
  using Error::Error;
};

class EncodingError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class TraceError : public Error {
 public:
  using Error::Error;
};

}  // namespace attnmod
