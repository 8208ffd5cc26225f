#pragma once

#include <stdexcept>
#include <string>

namespace nback {

/// Base class for every error raised by the harness.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Generator constraints that admit no solution (never resolved best-effort).
class InfeasibleConstraints : public Error {
 public:
  using Error::Error;
};

/// A file or message could not be parsed; `field()` names the offending field.
class ParseError : public Error {
 public:
  ParseError(std::string field, const std::string& what)
      : Error("parse error in '" + field + "': " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Data parsed fine but violates a domain invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A value would break a type invariant (e.g. "none ... identical").
class InvariantViolation : public Error {
 public:
  using Error::Error;
};

/// The subject lacks the capability a protocol needs.
class UnsupportedOperation : public Error {
 public:
  using Error::Error;
};

/// Network / process transport failure. Retryable by the caller.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, int attempts)
      : Error(what + " (after " + std::to_string(attempts) + " attempt(s))"), attempts_(attempts) {}
  int attempts() const { return attempts_; }

 private:
  int attempts_;
};

/// Token boundaries do not line up with the text they claim to cover.
class AlignmentError : public Error {
 public:
  AlignmentError(const std::string& what, long index)
      : Error(what + " (index " + std::to_string(index) + ")"), index_(index) {}
  long index() const { return index_; }

 private:
  long index_;
};

}  // namespace nback
