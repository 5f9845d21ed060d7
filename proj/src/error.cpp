#include "thermoviab/error.hpp"

namespace thermoviab {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingManifest: return "MissingManifest";
    case ErrorCode::MissingAnnotation: return "MissingAnnotation";
    case ErrorCode::CorruptPayload: return "CorruptPayload";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonMonotonicTimestamps: return "NonMonotonicTimestamps";
    case ErrorCode::InvalidTemperature: return "InvalidTemperature";
    case ErrorCode::InvalidAnnotation: return "InvalidAnnotation";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::DegeneratePolygon: return "DegeneratePolygon";
    case ErrorCode::FlatImage: return "FlatImage";
    case ErrorCode::Diverged: return "Diverged";
    case ErrorCode::NonInvertibleWarp: return "NonInvertibleWarp";
    case ErrorCode::NoColdRegion: return "NoColdRegion";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::EmptyRegion: return "EmptyRegion";
    case ErrorCode::TooFewPairs: return "TooFewPairs";
    case ErrorCode::DegenerateData: return "DegenerateData";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::MissingFamily: return "MissingFamily";
    case ErrorCode::EmptyClass: return "EmptyClass";
    case ErrorCode::TooFewCases: return "TooFewCases";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::StageOrder: return "StageOrder";
    case ErrorCode::ModelFormat: return "ModelFormat";
  }
  return "Unknown";
}

}  // namespace thermoviab
