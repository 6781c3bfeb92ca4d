#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace metatst {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file. Row and column are 1-based; 0 means "not applicable".
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t row, std::size_t column)
        : Error(what), row_(row), column_(column) {}

    std::size_t row() const noexcept { return row_; }
    std::size_t column() const noexcept { return column_; }

private:
    std::size_t row_;
    std::size_t column_;
};

/// A precondition on shapes, lengths or configuration was violated.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Transient failure talking to an external service; the caller may retry.
class RetryableError : public Error {
public:
    using Error::Error;
};

/// Training produced a non-finite value.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace metatst
