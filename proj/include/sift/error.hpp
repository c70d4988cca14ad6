#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sift {

enum class Errc {
  MalformedLine,
  UnknownTag,
  IobViolation,
  MissingVerb,
  InvalidScheme,
  OverlapError,
  OutOfBounds,
  GrammarViolation,
  InsufficientPool,
  MissingGold,
  VerbRequired,
  InvalidVariant,
  SegmentSplit,
  TokenizeFailure,
  PromptTooLong,
  EvalPrompt,
  EmptyMask,
  EmptyScheme,
  UnsupportedConstruct,
  ParseError,
  DeadEnd,
  ModelShapeMismatch,
  BadDims,
  UnknownTokenId,
  DivergenceDetected,
  LengthMismatch,
  EmptyDataset,
  MissingArtifact,
  ConfigError,
  ConfigHashMismatch,
  SeedMismatch,
  IoError,
};

inline std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::MalformedLine: return "MalformedLine";
    case Errc::UnknownTag: return "UnknownTag";
    case Errc::IobViolation: return "IobViolation";
    case Errc::MissingVerb: return "MissingVerb";
    case Errc::InvalidScheme: return "InvalidScheme";
    case Errc::OverlapError: return "OverlapError";
    case Errc::OutOfBounds: return "OutOfBounds";
    case Errc::GrammarViolation: return "GrammarViolation";
    case Errc::InsufficientPool: return "InsufficientPool";
    case Errc::MissingGold: return "MissingGold";
    case Errc::VerbRequired: return "VerbRequired";
    case Errc::InvalidVariant: return "InvalidVariant";
    case Errc::SegmentSplit: return "SegmentSplit";
    case Errc::TokenizeFailure: return "TokenizeFailure";
    case Errc::PromptTooLong: return "PromptTooLong";
    case Errc::EvalPrompt: return "EvalPrompt";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::EmptyScheme: return "EmptyScheme";
    case Errc::UnsupportedConstruct: return "UnsupportedConstruct";
    case Errc::ParseError: return "ParseError";
    case Errc::DeadEnd: return "DeadEnd";
    case Errc::ModelShapeMismatch: return "ModelShapeMismatch";
    case Errc::BadDims: return "BadDims";
    case Errc::UnknownTokenId: return "UnknownTokenId";
    case Errc::DivergenceDetected: return "DivergenceDetected";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::MissingArtifact: return "MissingArtifact";
    case Errc::ConfigError: return "ConfigError";
    case Errc::ConfigHashMismatch: return "ConfigHashMismatch";
    case Errc::SeedMismatch: return "SeedMismatch";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure in the library surfaces as this exception; `code()` tells
/// callers which contract was violated.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) { throw Error(code, message); }

}  // namespace sift
