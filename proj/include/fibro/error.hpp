// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fibro {

enum class ErrorCode {
  // nifti_io
  BadMagic,
  BadHeader,
  UnsupportedDatatype,
  TruncatedData,
  NonPositiveSpacing,
  InconsistentExtents,
  NonFiniteData,
  SingularAffine,
  ObliqueAffine,
  // preprocess
  InvalidConfig,
  KTooLarge,
  AllModalitiesMissing,
  BadBundle,
  // numerics
  ShapeMismatch,
  InputTooSmallForReflect,
  NoRecordedGraph,
  NonFiniteGradient,
  EpochOutOfRange,
  // model
  StageOutOfRange,
  InputTooSmall,
  EmptyAvailableSet,
  IncompatibleCheckpoint,
  // training
  BadStage,
  EmptyClass,
  BadLabel,
  EmptyFold,
  NonFiniteLoss,
  // evaluate
  CaseMismatch,
  ClassCountMismatch,
  MissingLabels,
  SingleClassOnly,
  // cli
  UnknownFlag,
  BadValue,
  Io,
};

std::string_view to_string(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::BadHeader: return "BadHeader";
    case ErrorCode::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorCode::TruncatedData: return "TruncatedData";
    case ErrorCode::NonPositiveSpacing: return "NonPositiveSpacing";
    case ErrorCode::InconsistentExtents: return "InconsistentExtents";
    case ErrorCode::NonFiniteData: return "NonFiniteData";
    case ErrorCode::SingularAffine: return "SingularAffine";
    case ErrorCode::ObliqueAffine: return "ObliqueAffine";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::KTooLarge: return "KTooLarge";
    case ErrorCode::AllModalitiesMissing: return "AllModalitiesMissing";
    case ErrorCode::BadBundle: return "BadBundle";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InputTooSmallForReflect: return "InputTooSmallForReflect";
    case ErrorCode::NoRecordedGraph: return "NoRecordedGraph";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::EpochOutOfRange: return "EpochOutOfRange";
    case ErrorCode::StageOutOfRange: return "StageOutOfRange";
    case ErrorCode::InputTooSmall: return "InputTooSmall";
    case ErrorCode::EmptyAvailableSet: return "EmptyAvailableSet";
    case ErrorCode::IncompatibleCheckpoint: return "IncompatibleCheckpoint";
    case ErrorCode::BadStage: return "BadStage";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::BadLabel: return "BadLabel";
    case ErrorCode::EmptyFold: return "EmptyFold";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::CaseMismatch: return "CaseMismatch";
    case ErrorCode::ClassCountMismatch: return "ClassCountMismatch";
    case ErrorCode::MissingLabels: return "MissingLabels";
    case ErrorCode::SingleClassOnly: return "SingleClassOnly";
    case ErrorCode::UnknownFlag: return "UnknownFlag";
    case ErrorCode::BadValue: return "BadValue";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

}  // namespace fibro
