#pragma once

#include <stdexcept>
#include <string>

namespace pond {

// Base of every error raised by the library. `exit_code` is the process exit
// status the CLI maps the error to.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, int exit_code = 4)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what, 4) {}
};

// Operation called in the wrong lifecycle state (e.g. backward before forward).
class StateError : public Error {
 public:
  explicit StateError(const std::string& what) : Error("state error: " + what, 4) {}
};

// A primitive produced NaN/Inf from finite inputs.
class NumericFault : public Error {
 public:
  explicit NumericFault(const std::string& what) : Error("numeric fault: " + what, 4) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what, 2) {}
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error("invalid argument: " + what, 4) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io error: " + what, 3) {}
};

// Container-format failures. Each is a distinct type so callers can tell a
// foreign file from a short one from a corrupted one.
class BadMagicError : public IoError {
 public:
  explicit BadMagicError(const std::string& what) : IoError("bad magic: " + what) {}
};

class TruncatedError : public IoError {
 public:
  explicit TruncatedError(const std::string& what) : IoError("truncated: " + what) {}
};

class ChecksumError : public IoError {
 public:
  explicit ChecksumError(const std::string& what) : IoError("checksum mismatch: " + what) {}
};

// Stored geometry disagrees with what the caller expects.
class CompatibilityError : public IoError {
 public:
  explicit CompatibilityError(const std::string& what) : IoError("incompatible: " + what) {}
};

}  // namespace pond
