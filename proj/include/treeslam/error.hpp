#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace treeslam
{

/// Failure categories raised across the library. The CLI maps them onto exit codes.
enum class ErrorKind
{
  InvalidValue,
  Contract,
  NotFound,
  Structure,
  Reference,
  Conflict,
  Ordering,
  InvalidCalibration,
  Decomposition,
  SingularObservation,
  JoinTolerance,
  Range,
  Consistency,
  SingularSystem,
  Divergence,
  Alignment,
  NotReady,
  Parse,
  Config,
  Binding,
  UnknownType,
  Association,
};

inline std::string_view to_string(ErrorKind kind)
{
  switch (kind) {
    case ErrorKind::InvalidValue: return "invalid-value";
    case ErrorKind::Contract: return "contract-violation";
    case ErrorKind::NotFound: return "not-found";
    case ErrorKind::Structure: return "structure";
    case ErrorKind::Reference: return "reference";
    case ErrorKind::Conflict: return "conflict";
    case ErrorKind::Ordering: return "ordering";
    case ErrorKind::InvalidCalibration: return "invalid-calibration";
    case ErrorKind::Decomposition: return "decomposition";
    case ErrorKind::SingularObservation: return "singular-observation";
    case ErrorKind::JoinTolerance: return "join-tolerance";
    case ErrorKind::Range: return "range";
    case ErrorKind::Consistency: return "consistency";
    case ErrorKind::SingularSystem: return "singular-system";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::Alignment: return "alignment";
    case ErrorKind::NotReady: return "not-ready";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Config: return "config";
    case ErrorKind::Binding: return "binding";
    case ErrorKind::UnknownType: return "unknown-type";
    case ErrorKind::Association: return "association";
  }
  return "unknown";
}

class Error : public std::runtime_error
{
public:
  Error(ErrorKind kind, const std::string & what)
  : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind)
  {}

  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

}  // namespace treeslam
