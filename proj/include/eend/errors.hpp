// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace eend {

/// Base of every error raised by the library. The CLI maps subclasses onto
/// exit codes: ConfigError -> 2, everything else -> 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration, shapes or hyperparameters.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Bad input data (empty corpus, mismatched shapes of data, out-of-range
/// annotation, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content (wrong WAV header, bad archive magic, ...).
class FormatError : public InputError {
 public:
  using InputError::InputError;
};

/// Text parsing failure; carries the 1-based line number.
class ParseError : public InputError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : InputError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Non-finite function value during numerical differentiation.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// Non-finite gradient or parameter during optimization.
class TrainingError : public Error {
 public:
  using Error::Error;
};

class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace eend
