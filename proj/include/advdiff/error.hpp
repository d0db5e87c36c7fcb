#pragma once

#include <stdexcept>
#include <string>

namespace advdiff {

// Failure classes map onto CLI exit codes (config=2, numeric=3, io=4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace advdiff
