#pragma once

#include <stdexcept>
#include <string>

namespace mavos {

// Base class for everything this library throws on purpose. Catching
// mavos::Error at the CLI boundary is enough to map failures to exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape mismatch between tensors. The message names both shapes.
struct DimensionError : Error {
    using Error::Error;
};

// API called out of contract (wrong call order, missing state, bad argument).
struct UsageError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required (NaN reaching a softmax,
// exploding loss, etc).
struct NumericError : Error {
    using Error::Error;
};

// Input data violates a documented invariant (overlapping masks, pixel
// values out of range, too many objects).
struct ValidationError : Error {
    using Error::Error;
};

// A serialized file is malformed. The message carries the byte offset of the
// first inconsistency whenever it is known.
struct FormatError : Error {
    using Error::Error;
};

// The OS said no: missing file, short read, failed write.
struct IoError : Error {
    using Error::Error;
};

// Mutually inconsistent configuration (checkpoint vs dataset dims, unknown
// policy name, bad flag combination).
struct ConfigError : Error {
    using Error::Error;
};

}  // namespace mavos
