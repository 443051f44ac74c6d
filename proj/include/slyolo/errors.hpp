#pragma once

#include <stdexcept>
#include <string>

namespace slyolo {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or argument combination (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor shape contract violated: channel/spatial mismatch or indivisible dims.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Operation not allowed in the object's current mode, e.g. fusing twice (exit code 3).
class StateError : public Error {
 public:
  using Error::Error;
};

// Non-finite or otherwise invalid numeric result (exit code 4).
class NumericError : public Error {
 public:
  using Error::Error;
};

// Argument outside a function's mathematical domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

class AuditError : public Error {
 public:
  using Error::Error;
};

class DecodeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, long line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  long line() const { return line_; }

 private:
  long line_;
};

}  // namespace slyolo
