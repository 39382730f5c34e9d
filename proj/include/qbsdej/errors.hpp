#pragma once

#include <stdexcept>
#include <string>

namespace qbsdej {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration (unknown kinds, malformed JSON,
/// out-of-range constants). Messages are path-qualified where possible.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Structural problems with a lattice: invalid time grid or mark space,
/// intensity-step violations, memory budget exceeded, mismatched value arrays.
class ModelError : public Error {
public:
    using Error::Error;
};

/// A measure change was rejected (non-positive or floored branch weight).
class MeasureError : public Error {
public:
    using Error::Error;
};

/// A numerical routine failed to converge; the message names the node.
class SolveError : public Error {
public:
    using Error::Error;
};

/// An operation was called outside its contract.
class PreconditionError : public Error {
public:
    using Error::Error;
};

}  // namespace qbsdej
