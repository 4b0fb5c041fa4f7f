#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bevtrack {

enum class Errc {
    DegenerateConfiguration,
    AtInfinity,
    Singular,
    Parallel,
    Degenerate,
    FrameOrder,
    NumericallySingular,
    Malformed,
    DimensionMismatch,
    NoValidPoints,
    InsufficientSamples,
    NonPositivePrediction,
    OutOfGrid,
    TooShort,
    NoLanesFound,
    ZeroSpeed,
    ZeroDenominator,
    ParseError,
    ConfigError,
    IoError,
};

std::string_view to_string(Errc code) noexcept;

// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

// Raised by parse_detections; carries the 1-based input line.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error(Errc::ParseError, "line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace bevtrack
