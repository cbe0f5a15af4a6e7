#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace spurclip {

enum class ErrorCode {
  BadMagic,
  DimensionMismatch,
  NonFiniteValue,
  ParseError,
  MissingVariant,
  UnknownAttribute,
  GroupStatsMismatch,
  InvalidManifest,
  ZeroVector,
  DegenerateBatch,
  EmptyPositives,
  EmptyNegatives,
  InvalidLossSpec,
  InvalidConfig,
  EmptyTrainSplit,
  EmptyValGroup,
  NonFiniteUpdate,
  EmptySlice,
  NoComputableScores,
  EmptyEvalGroup,
  ShapeMismatch,
  EmptyBox,
  NeedTwoClasses,
  BadConfig,
  IoError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::MissingVariant: return "MissingVariant";
    case ErrorCode::UnknownAttribute: return "UnknownAttribute";
    case ErrorCode::GroupStatsMismatch: return "GroupStatsMismatch";
    case ErrorCode::InvalidManifest: return "InvalidManifest";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::DegenerateBatch: return "DegenerateBatch";
    case ErrorCode::EmptyPositives: return "EmptyPositives";
    case ErrorCode::EmptyNegatives: return "EmptyNegatives";
    case ErrorCode::InvalidLossSpec: return "InvalidLossSpec";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::EmptyTrainSplit: return "EmptyTrainSplit";
    case ErrorCode::EmptyValGroup: return "EmptyValGroup";
    case ErrorCode::NonFiniteUpdate: return "NonFiniteUpdate";
    case ErrorCode::EmptySlice: return "EmptySlice";
    case ErrorCode::NoComputableScores: return "NoComputableScores";
    case ErrorCode::EmptyEvalGroup: return "EmptyEvalGroup";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyBox: return "EmptyBox";
    case ErrorCode::NeedTwoClasses: return "NeedTwoClasses";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

/// Validation errors (bad inputs, bad configuration) versus runtime failures.
/// The CLI maps the former to exit code 1 and the latter to exit code 2.
inline bool is_validation_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::ZeroVector:
    case ErrorCode::DegenerateBatch:
    case ErrorCode::NonFiniteUpdate:
    case ErrorCode::IoError:
      return false;
    default:
      return true;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::optional<std::size_t> index = std::nullopt)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), index_(index) {}

  ErrorCode code() const noexcept { return code_; }
  /// Row / example index the error refers to, when there is one.
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  ErrorCode code_;
  std::optional<std::size_t> index_;
};

}  // namespace spurclip
