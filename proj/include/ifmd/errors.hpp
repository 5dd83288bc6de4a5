#pragma once

#include <stdexcept>
#include <string>

namespace ifmd {

// Base of every error the library raises. Callers that only care about
// "something went wrong in ifmd" can catch this one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or a numerical procedure that broke its contract.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

class SingularMatrixError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class InvalidCovarianceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class BatchTooSmallError : public ContractError {
 public:
  using ContractError::ContractError;
};

class UninitializedStateError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Bad labels, empty datasets and similar input-data problems.
class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk file. `offset` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Checkpoint written by an incompatible version or for a different architecture.
class CheckpointMismatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace ifmd
