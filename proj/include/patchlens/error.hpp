#pragma once

#include <stdexcept>
#include <string>

namespace patchlens {

// Exit-code mapping used by the CLI:
//   UsageError -> 1, DataError -> 2, InvariantError -> 3.
// Precondition violations inside the library surface as std::invalid_argument
// or std::out_of_range and are reported as data errors.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

/// Zero-variance sample handed to a statistic that divides by the sd.
class DegenerateSampleError : public DataError {
 public:
  using DataError::DataError;
};

class InvariantError : public Error {
 public:
  using Error::Error;
};

}  // namespace patchlens
