#pragma once

#include <stdexcept>
#include <string>

namespace udanas {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A label index outside its variable's range, or an assignment of the wrong length.
class InvalidAssignment : public Error {
 public:
  using Error::Error;
};

/// The requested enumeration exceeds the exhaustive-search guard.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument outside its mathematical domain (temperature <= 0, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity appeared where a finite value is required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace udanas
