#pragma once

#include <stdexcept>
#include <string>

namespace flowrl {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mismatched array or image dimensions.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Degenerate or out-of-image geometry.
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Value outside the domain of an operation (e.g. scaling an all-zero vector).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Precondition of an API contract violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed file or stream contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Telemetry framing problem in a deployment session; carries the input line.
class SessionError : public Error {
 public:
  SessionError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace flowrl
