#pragma once

#include <stdexcept>
#include <string>

namespace downscaler {

/// Malformed or inconsistent input data (bad CSV rows, unknown sites, invalid coordinates).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A parameter outside its admissible range (negative taper radius, T < 2, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Factorization failures, divergent chains, numerically inconsistent results.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace downscaler
