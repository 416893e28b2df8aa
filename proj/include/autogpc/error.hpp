#pragma once

#include <stdexcept>
#include <string>

namespace autogpc {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed kernel trees, bad paths, depth violations, parameter-length mismatches.
struct KernelError : Error {
  using Error::Error;
};

// Cholesky failures, negative variances, non-finite gradients.
struct NumericalError : Error {
  using Error::Error;
};

// Input files and datasets.
struct DataError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct SmcError : Error {
  using Error::Error;
};

}  // namespace autogpc
