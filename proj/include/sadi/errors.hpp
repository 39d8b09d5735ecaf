#pragma once

#include <stdexcept>
#include <string>

namespace sadi {

// Error taxonomy used across the library. The CLI maps these onto exit codes:
// ConfigError/ArgError -> usage, DataError -> data, NumericError -> numeric.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between operands.
struct DimError : Error {
  using Error::Error;
};

// A scalar argument outside its documented domain.
struct ArgError : Error {
  using Error::Error;
};

// Inconsistent or out-of-range configuration.
struct ConfigError : Error {
  using Error::Error;
};

// Files, parsing, schema and checkpoint compatibility.
struct DataError : Error {
  using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
  using Error::Error;
};

}  // namespace sadi
