#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace equity {

enum class ErrorKind {
  MalformedHeader,
  DimensionMismatch,
  NonFiniteValue,
  DuplicateSampleId,
  IoFailure,
  Validation,
  InvalidConfig,
  NonFiniteUpdate,
  KTooLarge,
  InsufficientPoints,
  EmptyAssignment,
  NoClusters,
  DomainError,
  DivergedLoss,
  MissingUpstreamArtifact,
  ConfigMismatch,
  Locked,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedHeader: return "MalformedHeader";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::DuplicateSampleId: return "DuplicateSampleId";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::Validation: return "Validation";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::NonFiniteUpdate: return "NonFiniteUpdate";
    case ErrorKind::KTooLarge: return "KTooLarge";
    case ErrorKind::InsufficientPoints: return "InsufficientPoints";
    case ErrorKind::EmptyAssignment: return "EmptyAssignment";
    case ErrorKind::NoClusters: return "NoClusters";
    case ErrorKind::DomainError: return "DomainError";
    case ErrorKind::DivergedLoss: return "DivergedLoss";
    case ErrorKind::MissingUpstreamArtifact: return "MissingUpstreamArtifact";
    case ErrorKind::ConfigMismatch: return "ConfigMismatch";
    case ErrorKind::Locked: return "Locked";
  }
  return "Unknown";
}

// Every error raised by the toolkit carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 protected:
  struct Verbatim {};
  Error(Verbatim, ErrorKind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}

 private:
  ErrorKind kind_;
};

}  // namespace equity
