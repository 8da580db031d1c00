#pragma once

#include <stdexcept>
#include <string>

namespace mixquant {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor dimensions do not chain.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf reached an op, or an op left its domain.
struct NumericError : Error {
  using Error::Error;
};

// A file could not be decoded at all.
struct ParseError : Error {
  using Error::Error;
};

// A file decoded but violates a dataset/model invariant.
struct SchemaError : Error {
  using Error::Error;
};

struct PreconditionError : Error {
  using Error::Error;
};

// Checkpoint and data disagree (dims, magic, truncation).
struct ArtifactError : Error {
  using Error::Error;
};

}  // namespace mixquant
