#pragma once

#include <stdexcept>
#include <string>

namespace structgp {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or command-line arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Factorization failures, divergence, non-finite values.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace structgp
