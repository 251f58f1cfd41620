#pragma once

#include <stdexcept>
#include <string>

namespace ctxfuse {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes are incompatible with an operation's contract.
struct DimensionError : Error {
    using Error::Error;
};

// A configuration value is invalid or infeasible (bad grid, impossible
// placement, non-integral conv output size, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Training diverged or was asked to do something undefined.
struct TrainingError : Error {
    using Error::Error;
};

// Non-finite values where finite data is required.
struct NumericError : Error {
    using Error::Error;
};

// File format / serialization problems.
struct IoError : Error {
    using Error::Error;
};

}  // namespace ctxfuse
