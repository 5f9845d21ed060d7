#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace thermoviab {

enum class ErrorCode {
  MissingManifest,
  MissingAnnotation,
  CorruptPayload,
  DimensionMismatch,
  NonMonotonicTimestamps,
  InvalidTemperature,
  InvalidAnnotation,
  IoFailure,
  DegeneratePolygon,
  FlatImage,
  Diverged,
  NonInvertibleWarp,
  NoColdRegion,
  NonFiniteLoss,
  EmptyDataset,
  EmptyRegion,
  TooFewPairs,
  DegenerateData,
  SingleClass,
  TooFewSamples,
  MissingFamily,
  EmptyClass,
  TooFewCases,
  InvalidSpec,
  StageOrder,
  ModelFormat,
};

std::string_view to_string(ErrorCode code);

/// Exception carrying a machine-readable code; the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace thermoviab
