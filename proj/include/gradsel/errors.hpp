#pragma once

#include <stdexcept>
#include <string>

namespace gradsel {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mismatched layer counts or matrix dimensions between inputs.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration: unknown keys, out-of-range values, bad strategy names.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite inputs or systems that cannot be solved as posed.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace gradsel
