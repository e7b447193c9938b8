#pragma once

#include <stdexcept>
#include <string>

namespace exgn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or out-of-range arguments to an op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced by a forward op.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated, or version-mismatched container files and
/// invariant violations found while reading them.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Bad command-line usage or configuration.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace exgn
