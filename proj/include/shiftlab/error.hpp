#pragma once

#include <stdexcept>
#include <string>

namespace shiftlab {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller passed arguments that violate a documented precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Input data (a pack, a config file, a feature set) is inconsistent.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or stream failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace shiftlab
