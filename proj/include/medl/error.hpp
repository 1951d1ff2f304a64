#pragma once

#include <stdexcept>
#include <string>

namespace medl {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not satisfy an op's shape rule.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input outside a function's mathematical domain (log of a non-positive value, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed user input: files, configs, datasets.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace medl
