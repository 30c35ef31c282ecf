#pragma once

#include <stdexcept>
#include <string>

namespace minitx {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A non-finite value appeared during a numeric evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file or inconsistent external data.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace minitx
