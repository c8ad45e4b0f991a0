#pragma once

#include <stdexcept>
#include <string>

namespace cad {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent input data (feature files, manifests, checkpoints).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A computation produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// An API precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace cad
