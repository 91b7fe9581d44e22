#pragma once

#include <stdexcept>
#include <string>

namespace gala {

/// Caller broke a documented precondition (bad shape, out-of-range value, ...).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced NaN/Inf or could not proceed numerically.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or missing input data (files, records, dataset folders).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gala
