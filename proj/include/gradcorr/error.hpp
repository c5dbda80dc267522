#pragma once

#include <stdexcept>
#include <string>

namespace gradcorr {

/// Base of every error the library throws. `exit_code()` maps onto the CLI
/// contract (2 config, 3 data, 4 numeric).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

class DimensionError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

class TrainingError : public NumericError {
 public:
  TrainingError(const std::string& what, int epoch)
      : NumericError(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class UsageError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class SpecError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class InputError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class FormatError : public InputError {
 public:
  using InputError::InputError;
};

class IoError : public InputError {
 public:
  using InputError::InputError;
};

class DiagnosticError : public InputError {
 public:
  using InputError::InputError;
};

}  // namespace gradcorr
