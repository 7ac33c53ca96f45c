#pragma once

#include <stdexcept>
#include <string>

namespace selar {

// Base of every error raised by the library. `kind()` is a stable token used
// by the command-line front end when printing machine-parseable errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape"; }
};

class ValidationError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "validation"; }
};

class NormalizationError : public ValidationError {
 public:
  using ValidationError::ValidationError;
  const char* kind() const noexcept override { return "normalization"; }
};

class EvaluationError : public ValidationError {
 public:
  using ValidationError::ValidationError;
  const char* kind() const noexcept override { return "evaluation"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
};

class ParseError : public IoError {
 public:
  using IoError::IoError;
  const char* kind() const noexcept override { return "parse"; }
};

// SLRT tensor file errors. Each failure mode has its own type.
class FormatError : public IoError {
 public:
  using IoError::IoError;
  const char* kind() const noexcept override { return "format"; }
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
  const char* kind() const noexcept override { return "bad_magic"; }
};

class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
  const char* kind() const noexcept override { return "version_mismatch"; }
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
  const char* kind() const noexcept override { return "truncated"; }
};

class DimensionOverflowError : public FormatError {
 public:
  using FormatError::FormatError;
  const char* kind() const noexcept override { return "dimension_overflow"; }
};

}  // namespace selar
