#include "bevtrack/error.hpp"

namespace bevtrack {

std::string_view to_string(Errc code) noexcept {
    switch (code) {
        case Errc::DegenerateConfiguration: return "DegenerateConfiguration";
        case Errc::AtInfinity: return "AtInfinity";
        case Errc::Singular: return "Singular";
        case Errc::Parallel: return "Parallel";
        case Errc::Degenerate: return "Degenerate";
        case Errc::FrameOrder: return "FrameOrder";
        case Errc::NumericallySingular: return "NumericallySingular";
        case Errc::Malformed: return "Malformed";
        case Errc::DimensionMismatch: return "DimensionMismatch";
        case Errc::NoValidPoints: return "NoValidPoints";
        case Errc::InsufficientSamples: return "InsufficientSamples";
        case Errc::NonPositivePrediction: return "NonPositivePrediction";
        case Errc::OutOfGrid: return "OutOfGrid";
        case Errc::TooShort: return "TooShort";
        case Errc::NoLanesFound: return "NoLanesFound";
        case Errc::ZeroSpeed: return "ZeroSpeed";
        case Errc::ZeroDenominator: return "ZeroDenominator";
        case Errc::ParseError: return "ParseError";
        case Errc::ConfigError: return "ConfigError";
        case Errc::IoError: return "IoError";
    }
    return "Unknown";
}

}  // namespace bevtrack
