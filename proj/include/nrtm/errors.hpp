#pragma once

#include <stdexcept>
#include <string>

namespace nrtm {

/// Base for every error raised by the library. The CLI maps the concrete
/// subclasses onto its exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shape or length mismatch between arguments.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration or argument value (out of domain, unknown key, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Non-finite loss, divergence, or an inversion that cannot proceed.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Filesystem failure.
class IoError : public Error {
public:
    using Error::Error;
};

/// Malformed serialized input. `what()` carries the location.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Query outside the domain of a lookup table.
class ExtrapolationError : public Error {
public:
    using Error::Error;
};

}  // namespace nrtm
