#pragma once

#include <stdexcept>
#include <string>

namespace subgd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes or lengths that do not fit together.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Inputs that violate a documented precondition (non-finite, empty, out of range).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// The direction matrix carries no usable spectrum.
class DegenerateSubspaceError : public Error {
public:
    using Error::Error;
};

/// Training or a rollout produced non-finite values.
class DivergenceError : public Error {
public:
    using Error::Error;
};

/// The adaptive integrator could not keep its step above the underflow floor.
class StiffnessError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class CorruptFileError : public IoError {
public:
    using IoError::IoError;
};

/// Malformed or inconsistent run configuration (CLI exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A stage was asked to run before the artifacts it consumes exist (CLI exit code 3).
class ArtifactError : public Error {
public:
    using Error::Error;
};

} // namespace subgd
