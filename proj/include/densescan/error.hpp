#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace densescan {

enum class ErrorCode {
    InvalidShape,
    ElementCountMismatch,
    AxisOutOfRange,
    RangeOutOfBounds,
    ShapeMismatch,
    ChannelMismatch,
    SpatialTooSmall,
    WindowTooLarge,
    UnequalShiftOutputs,
    InvalidArgument,
    ShapeUnderflow,
    NotSinglePixelOutput,
    NoFeasiblePadding,
    BudgetTooSmall,
    FormatError,
    IoError,
    VerificationFailed,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidShape: return "InvalidShape";
        case ErrorCode::ElementCountMismatch: return "ElementCountMismatch";
        case ErrorCode::AxisOutOfRange: return "AxisOutOfRange";
        case ErrorCode::RangeOutOfBounds: return "RangeOutOfBounds";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::ChannelMismatch: return "ChannelMismatch";
        case ErrorCode::SpatialTooSmall: return "SpatialTooSmall";
        case ErrorCode::WindowTooLarge: return "WindowTooLarge";
        case ErrorCode::UnequalShiftOutputs: return "UnequalShiftOutputs";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::ShapeUnderflow: return "ShapeUnderflow";
        case ErrorCode::NotSinglePixelOutput: return "NotSinglePixelOutput";
        case ErrorCode::NoFeasiblePadding: return "NoFeasiblePadding";
        case ErrorCode::BudgetTooSmall: return "BudgetTooSmall";
        case ErrorCode::FormatError: return "FormatError";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::VerificationFailed: return "VerificationFailed";
    }
    return "Unknown";
}

/// All library failures are reported through this exception; code() names
/// the failure class so callers (and the CLI exit-code mapping) can branch.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace densescan
