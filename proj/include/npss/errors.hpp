#pragma once

#include <stdexcept>
#include <string>

namespace npss {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid data content: out-of-range labels, infeasible generation, malformed images.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or undefined numerical quantities.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Persisted file does not match the expected layout or model configuration.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Attention over a center set with no populated class.
class AggregationError : public Error {
 public:
  using Error::Error;
};

}  // namespace npss
