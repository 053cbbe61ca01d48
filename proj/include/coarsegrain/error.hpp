#pragma once

#include <stdexcept>
#include <string>

namespace coarsegrain {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

/// Raised when a binary quantity is requested at a posterior with eta_c in {0, 1}.
class DegeneratePosterior : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// A scene structure could not be placed within the retry budget.
class GenerationError : public Error {
public:
    using Error::Error;
};

/// A malformed experiment config. `line` is 1-based, 0 when the error is not tied to a line.
class ConfigError : public InvalidInput {
public:
    ConfigError(int line, const std::string& message)
        : InvalidInput(line > 0 ? "line " + std::to_string(line) + ": " + message : message), line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

}  // namespace coarsegrain
