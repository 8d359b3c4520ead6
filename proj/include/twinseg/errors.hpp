#pragma once

#include <stdexcept>
#include <string>

namespace twinseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes do not satisfy an operation's shape contract.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class VersionError : public Error {
 public:
  VersionError(const std::string& found, const std::string& expected)
      : Error("checkpoint version mismatch: file has '" + found +
              "', this build reads '" + expected + "'") {}
};

class NonFiniteLossError : public Error {
 public:
  using Error::Error;
};

}  // namespace twinseg
