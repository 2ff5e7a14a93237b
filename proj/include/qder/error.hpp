#pragma once

#include <stdexcept>
#include <string>

namespace qder {

/// Process exit codes shared by every CLI command.
enum class ExitCode : int {
    ok = 0,
    data_error = 1,
    io_error = 2,
    numeric_error = 3,
};

/// Base class for all errors raised by the library. Each subclass maps to one
/// exit code so that the CLI can translate failures without inspecting text.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    [[nodiscard]] virtual ExitCode exit_code() const noexcept { return ExitCode::data_error; }
};

/// Malformed, inconsistent or invalid input data.
class DataError : public Error {
public:
    using Error::Error;
};

/// Failure to open, read or write a file.
class IoError : public Error {
public:
    using Error::Error;
    [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::io_error; }
};

/// Non-finite values during optimisation or scoring.
class NumericError : public Error {
public:
    using Error::Error;
    [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::numeric_error; }
};

}  // namespace qder
