#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ucmr {

enum class ErrorCode {
  AllSourcesEmpty,
  RemoteUnavailable,
  MissingEmbedding,
  DimensionMismatch,
  TooFewSentences,
  EigensolveFailure,
  ShapeMismatch,
  NonFiniteLoss,
  InvalidState,
  EmptyRule,
  EmptyInput,
  EmptyReference,
  UnknownCorpus,
  PipelineError,
  SessionNotFound,
  NotAwaitingAnswer,
  Validation,
};

inline std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::AllSourcesEmpty: return "AllSourcesEmpty";
    case ErrorCode::RemoteUnavailable: return "RemoteUnavailable";
    case ErrorCode::MissingEmbedding: return "MissingEmbedding";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::TooFewSentences: return "TooFewSentences";
    case ErrorCode::EigensolveFailure: return "EigensolveFailure";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::InvalidState: return "InvalidState";
    case ErrorCode::EmptyRule: return "EmptyRule";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::EmptyReference: return "EmptyReference";
    case ErrorCode::UnknownCorpus: return "UnknownCorpus";
    case ErrorCode::PipelineError: return "PipelineError";
    case ErrorCode::SessionNotFound: return "SessionNotFound";
    case ErrorCode::NotAwaitingAnswer: return "NotAwaitingAnswer";
    case ErrorCode::Validation: return "Validation";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (CLI exit codes, HTTP status mapping) can branch without parsing
/// messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ucmr
