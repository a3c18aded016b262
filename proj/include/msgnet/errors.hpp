#pragma once

#include <stdexcept>
#include <string>

namespace msgnet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or grid dimensions that do not fit together.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Input values outside their domain (non-finite, out of range, ...).
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A pipeline stage was invoked without the artifacts it depends on.
class PrerequisiteError : public Error {
public:
    using Error::Error;
};

/// Reading or writing files failed.
class IoError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

}  // namespace msgnet
