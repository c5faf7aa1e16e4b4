#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fodshift {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A linear system is rank deficient or too badly conditioned to solve.
class IllConditioned : public Error {
public:
    using Error::Error;
};

/// An iterative solver stopped without meeting its tolerance.
class NumericalFailure : public Error {
public:
    NumericalFailure(const std::string& what, double residual)
        : Error(what + " (residual " + std::to_string(residual) + ")"), residual_(residual) {}
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

/// Training produced a non-finite loss.
class TrainingFailure : public Error {
public:
    TrainingFailure(const std::string& what, int epoch)
        : Error(what + " at epoch " + std::to_string(epoch)), epoch_(epoch) {}
    int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

/// Malformed file content. `offset` is a byte offset for binary files and a
/// 1-based line number for text files.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset, bool is_line = false)
        : Error(what + (is_line ? " at line " : " at offset ") + std::to_string(offset)),
          detail_(what), offset_(offset), is_line_(is_line) {}
    std::size_t offset() const noexcept { return offset_; }
    bool is_line() const noexcept { return is_line_; }
    /// The message without its location.
    const std::string& detail() const noexcept { return detail_; }

private:
    std::string detail_;
    std::size_t offset_;
    bool is_line_;
};

}  // namespace fodshift
