#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gem {

enum class ErrorKind {
  // activation store
  SizeMismatch,
  BadField,
  MissingFile,
  NonFinite,
  ShapeMismatch,
  BadSpec,
  Io,
  // geometry / detector
  DegenerateDirection,
  ZeroVariance,
  UndefinedBoundary,
  NoDefinedDirections,
  UndefinedSettledDirection,
  NoDefinedSeparation,
  // ablation
  DimensionMismatch,
  UndefinedDirectionInWindow,
  DegenerateAverage,
  ZeroBaseline,
  ExcludedZeroReduction,
  NoCandidate,
  TooManyNodes,
  PropagatorFailure,
  // stats
  AllZero,
  UnknownModel,
  // pipeline / report
  InvalidManifest,
  MissingStudy,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::SizeMismatch: return "SizeMismatch";
    case ErrorKind::BadField: return "BadField";
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::BadSpec: return "BadSpec";
    case ErrorKind::Io: return "Io";
    case ErrorKind::DegenerateDirection: return "DegenerateDirection";
    case ErrorKind::ZeroVariance: return "ZeroVariance";
    case ErrorKind::UndefinedBoundary: return "UndefinedBoundary";
    case ErrorKind::NoDefinedDirections: return "NoDefinedDirections";
    case ErrorKind::UndefinedSettledDirection: return "UndefinedSettledDirection";
    case ErrorKind::NoDefinedSeparation: return "NoDefinedSeparation";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::UndefinedDirectionInWindow: return "UndefinedDirectionInWindow";
    case ErrorKind::DegenerateAverage: return "DegenerateAverage";
    case ErrorKind::ZeroBaseline: return "ZeroBaseline";
    case ErrorKind::ExcludedZeroReduction: return "ExcludedZeroReduction";
    case ErrorKind::NoCandidate: return "NoCandidate";
    case ErrorKind::TooManyNodes: return "TooManyNodes";
    case ErrorKind::PropagatorFailure: return "PropagatorFailure";
    case ErrorKind::AllZero: return "AllZero";
    case ErrorKind::UnknownModel: return "UnknownModel";
    case ErrorKind::InvalidManifest: return "InvalidManifest";
    case ErrorKind::MissingStudy: return "MissingStudy";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Input-side failures (exit code 2 in the CLI) as opposed to degenerate analysis results.
inline bool is_input_error(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::SizeMismatch:
    case ErrorKind::BadField:
    case ErrorKind::MissingFile:
    case ErrorKind::NonFinite:
    case ErrorKind::ShapeMismatch:
    case ErrorKind::BadSpec:
    case ErrorKind::Io:
    case ErrorKind::InvalidManifest:
    case ErrorKind::MissingStudy:
    case ErrorKind::UnknownModel:
    case ErrorKind::DimensionMismatch:
      return true;
    default:
      return false;
  }
}

// Analysis ran on valid input but the geometry admits no answer (exit code 3).
inline bool is_degenerate_result(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DegenerateDirection:
    case ErrorKind::ZeroVariance:
    case ErrorKind::UndefinedBoundary:
    case ErrorKind::NoDefinedDirections:
    case ErrorKind::UndefinedSettledDirection:
    case ErrorKind::NoDefinedSeparation:
    case ErrorKind::UndefinedDirectionInWindow:
    case ErrorKind::DegenerateAverage:
    case ErrorKind::ZeroBaseline:
    case ErrorKind::ExcludedZeroReduction:
    case ErrorKind::NoCandidate:
    case ErrorKind::AllZero:
      return true;
    default:
      return false;
  }
}

}  // namespace gem
