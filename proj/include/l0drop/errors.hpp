#pragma once

#include <stdexcept>
#include <string>

namespace l0drop {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
    ok = 0,
    failure = 1,
    config = 2,
    data = 3,
    numeric = 4,
};

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual ExitCode exit_code() const noexcept { return ExitCode::failure; }
};

// Shape or dimension disagreement between operands.
class DimensionError : public Error {
public:
    using Error::Error;
};

// Argument outside the mathematical domain of an operation (log of 0, u in {0,1}, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// Caller violated a precondition (non-scalar backward, fully masked attention row, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::numeric; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::config; }
};

class DataError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::data; }
};

// Every gate of a sentence is closed, so no compacted memory can be formed.
class DegenerateMemoryError : public Error {
public:
    using Error::Error;
};

}  // namespace l0drop
