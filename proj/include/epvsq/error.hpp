#pragma once

#include <stdexcept>
#include <string>

namespace epvsq {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed file contents (bad magic, version, header fields, truncated payload).
class FormatError : public Error {
 public:
  using Error::Error;
};

// A value violates a documented invariant (NaN payload, non-binary mask, sigma <= 0).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Tensor or volume extents do not agree with what an operation needs.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A configuration cannot be realised (network shape underflow, invalid ranges).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// The API was called in the wrong state (unfitted dictionary, non-scalar root).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Input carries no information for the requested quantity (constant data, empty ROI).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

// Lesion placement failed after the bounded number of retries.
class PlacementError : public Error {
 public:
  using Error::Error;
};

// Training diverged (non-finite loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

// An experiment spec is inconsistent with the data it refers to.
class SpecError : public Error {
 public:
  using Error::Error;
};

}  // namespace epvsq
