#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hico {

enum class ErrorKind {
  InvalidShape,
  ShapeError,
  DegenerateBatch,
  NotScalar,
  TapeConsumed,
  NumericalFailure,
  InvalidHyperparameter,
  EmptyBatch,
  ConfigError,
  TooFewFrames,
  FormatError,
  CorruptFile,
  EmptyEvaluation,
  IoError,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidShape: return "InvalidShape";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::DegenerateBatch: return "DegenerateBatch";
    case ErrorKind::NotScalar: return "NotScalar";
    case ErrorKind::TapeConsumed: return "TapeConsumed";
    case ErrorKind::NumericalFailure: return "NumericalFailure";
    case ErrorKind::InvalidHyperparameter: return "InvalidHyperparameter";
    case ErrorKind::EmptyBatch: return "EmptyBatch";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::TooFewFrames: return "TooFewFrames";
    case ErrorKind::FormatError: return "FormatError";
    case ErrorKind::CorruptFile: return "CorruptFile";
    case ErrorKind::EmptyEvaluation: return "EmptyEvaluation";
    case ErrorKind::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the ErrorKind tags so
/// callers (the CLI in particular) can map it to an exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace hico
