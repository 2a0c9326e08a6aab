#pragma once

#include <stdexcept>
#include <string>

namespace cfirn {

/// Base of every error thrown by the library. The CLI maps `is_validation()`
/// errors to exit code 1 and everything else to exit code 2.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual bool is_validation() const { return true; }
};

/// Bad configuration value or inconsistent option set.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
};

/// Malformed input text (manifest row, config line, ...).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line)
      : Error("parse error at line " + std::to_string(line) + ": " + what), line_(line) {}
  explicit ParseError(const std::string& what) : Error("parse error: " + what) {}
  int line() const { return line_; }

 private:
  int line_ = 0;
};

/// Well-formed input that fails a semantic check (missing files, ...).
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error("validation error: " + what) {}
};

/// A caller broke a documented precondition (shape mismatch, bad index, ...).
class ContractViolation : public Error {
 public:
  explicit ContractViolation(const std::string& what) : Error("contract violation: " + what) {}
};

/// NaN / Inf produced inside a named module.
class NumericError : public Error {
 public:
  NumericError(const std::string& module, const std::string& what)
      : Error("numeric error in " + module + ": " + what), module_(module) {}
  bool is_validation() const override { return false; }
  const std::string& module() const { return module_; }

 private:
  std::string module_;
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("i/o error: " + what) {}
  bool is_validation() const override { return false; }
};

}  // namespace cfirn
