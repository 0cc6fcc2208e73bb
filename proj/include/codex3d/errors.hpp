#pragma once

#include <stdexcept>
#include <string>

namespace codex3d {

/// Process exit codes used by the command-line front end.
enum class ExitCode : int {
    ok = 0,
    failure = 1,
    config = 2,
    dependency = 3,
    numerical = 4,
};

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual ExitCode exit_code() const noexcept { return ExitCode::failure; }
};

/// Invalid configuration or out-of-range parameter. The message names the field.
class ConfigError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::config; }
};

/// A pipeline stage was requested before the artifacts it consumes exist.
class DependencyError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::dependency; }
};

/// Non-finite losses, activations or probabilities.
class NumericalError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::numerical; }
};

/// Malformed or version-mismatched file contents.
class SchemaError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

} // namespace codex3d
