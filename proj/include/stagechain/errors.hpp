#pragma once

#include <stdexcept>
#include <string>

namespace stagechain {

// Base of every error raised by the library. The CLI maps the concrete
// subclasses onto its exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class LengthError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by a forward or backward computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed input data: JSON, JSONL, dataset records, config values.
class DataError : public Error {
 public:
  using Error::Error;
};

// A checkpoint, transcript or other prerequisite file is missing.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace stagechain
