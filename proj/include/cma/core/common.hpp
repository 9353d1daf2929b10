#pragma once

// Error taxonomy and check macros shared across the library.

#include <sstream>
#include <stdexcept>
#include <string>

namespace cma {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Bad tensor ranks/dims, incompatible operand shapes.
class ShapeError : public Error {
public:
  using Error::Error;
};

// Invalid hyperparameters or module configuration.
class ConfigError : public Error {
public:
  using Error::Error;
};

// Caller-supplied values outside the documented domain.
class InputError : public Error {
public:
  using Error::Error;
};

// Empty feasible region in a constrained projection.
class InfeasibilityError : public InputError {
public:
  using InputError::InputError;
};

// Datasets, manifests, checkpoints that fail to load or validate.
class DataError : public Error {
public:
  using Error::Error;
};

// Non-finite losses or other numeric breakdown during training.
class NumericError : public Error {
public:
  using Error::Error;
};

class IoError : public Error {
public:
  using Error::Error;
};

}  // namespace cma

#define CMA_CHECK(cond, ExType, msg)        \
  do {                                      \
    if (!(cond)) {                          \
      std::ostringstream cma_oss_;          \
      cma_oss_ << msg; /* NOLINT */         \
      throw ExType(cma_oss_.str());         \
    }                                       \
  } while (0)

#define CMA_CHECK_SHAPE(cond, msg) CMA_CHECK(cond, ::cma::ShapeError, msg)
#define CMA_CHECK_CFG(cond, msg) CMA_CHECK(cond, ::cma::ConfigError, msg)
#define CMA_CHECK_INPUT(cond, msg) CMA_CHECK(cond, ::cma::InputError, msg)
