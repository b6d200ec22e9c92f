#pragma once

#include <stdexcept>
#include <string>

namespace dselect {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not fit the operation. Messages name the offending node.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A graph leaf has no value bound to it, or a name is unknown.
class BindingError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Precondition violations of the pure math routines.
class DomainError : public Error {
 public:
  using Error::Error;
};

}  // namespace dselect
