#pragma once

#include <stdexcept>
#include <string>

namespace mcorr {

// Bad input or configuration. The CLI maps this to exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failure while computing on valid input (I/O, divergence, sampler trouble).
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public RuntimeError {
 public:
  using RuntimeError::RuntimeError;
};

}  // namespace mcorr
