#pragma once

#include <stdexcept>
#include <string>

namespace mpd {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape product does not fit in addressable memory.
class SizeError : public Error {
 public:
  using Error::Error;
};

// Out-of-range hyperparameter (retaining probability, std, region size, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Incompatible shapes or windows that leave the input.
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Input violates a numeric precondition, e.g. a negative activation fed
// into a probability-based pooling scheme.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Malformed dataset or model file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Malformed architecture string.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mpd
