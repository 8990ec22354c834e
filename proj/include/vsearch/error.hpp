#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vsearch {

enum class ErrorCode {
  kDecodeError,
  kTooSmall,
  kInsufficientSamples,
  kEmptyDescriptorSet,
  kCorruptSignature,
  kCodebookMismatch,
  kCorruptCodebook,
  kDuplicateImageId,
  kCorruptIndex,
  kNoShardsAvailable,
  kUnknownModel,
  kDetectorError,
  kEmptyCrop,
  kInvalidArgument,
  kIoError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDecodeError: return "DecodeError";
    case ErrorCode::kTooSmall: return "TooSmall";
    case ErrorCode::kInsufficientSamples: return "InsufficientSamples";
    case ErrorCode::kEmptyDescriptorSet: return "EmptyDescriptorSet";
    case ErrorCode::kCorruptSignature: return "CorruptSignature";
    case ErrorCode::kCodebookMismatch: return "CodebookMismatch";
    case ErrorCode::kCorruptCodebook: return "CorruptCodebook";
    case ErrorCode::kDuplicateImageId: return "DuplicateImageId";
    case ErrorCode::kCorruptIndex: return "CorruptIndex";
    case ErrorCode::kNoShardsAvailable: return "NoShardsAvailable";
    case ErrorCode::kUnknownModel: return "UnknownModel";
    case ErrorCode::kDetectorError: return "DetectorError";
    case ErrorCode::kEmptyCrop: return "EmptyCrop";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

/// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace vsearch
