#pragma once

#include <stdexcept>
#include <string>

namespace dael {

/// Violated precondition of a public operation.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Tensor shapes that do not conform to an operation's rules.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// NaN or Inf produced by a forward or backward computation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed dataset or checkpoint file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dael
