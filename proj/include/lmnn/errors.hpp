#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lmnn {

enum class ErrorCode {
  DimensionMismatch,
  NonSPD,
  ShapeMismatch,
  NonFiniteLoss,
  JacobianTooLarge,
  DegenerateDirections,
  AllNonFinite,
  CGBreakdown,
  InvalidArgument,
  InvalidRange,
  BadMagic,
  TruncatedFile,
  CountMismatch,
  SubsetTooLarge,
  IoError,
  ParseError,
  UnknownKey,
  UnknownValue,
  TypeError,
  MissingColumn,
  EmptyCSV,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonSPD: return "NonSPD";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::JacobianTooLarge: return "JacobianTooLarge";
    case ErrorCode::DegenerateDirections: return "DegenerateDirections";
    case ErrorCode::AllNonFinite: return "AllNonFinite";
    case ErrorCode::CGBreakdown: return "CGBreakdown";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::InvalidRange: return "InvalidRange";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::CountMismatch: return "CountMismatch";
    case ErrorCode::SubsetTooLarge: return "SubsetTooLarge";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::UnknownKey: return "UnknownKey";
    case ErrorCode::UnknownValue: return "UnknownValue";
    case ErrorCode::TypeError: return "TypeError";
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::EmptyCSV: return "EmptyCSV";
  }
  return "Unknown";
}

// Every failure raised by the library carries one of the codes above so
// callers (and tests) can branch on the kind without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace lmnn
