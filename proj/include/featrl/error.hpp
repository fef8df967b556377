#pragma once

#include <stdexcept>
#include <string>

namespace featrl {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed input data or schema (bad CSV, missing column, unparseable cell, ...).
class SchemaError : public Error {
public:
    using Error::Error;
};

// Invalid configuration or argument combination.
class ConfigError : public Error {
public:
    using Error::Error;
};

// A data-dependent condition that makes a computation undefined
// (degenerate target, class too small for the fold count, ...).
class DataError : public Error {
public:
    using Error::Error;
};

} // namespace featrl
