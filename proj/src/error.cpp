#include "milkit/error.hpp"

namespace milkit {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDuplicateSlideId: return "DuplicateSlideId";
    case ErrorCode::kUnknownClass: return "UnknownClass";
    case ErrorCode::kEmptyIndex: return "EmptyIndex";
    case ErrorCode::kInvalidFractions: return "InvalidFractions";
    case ErrorCode::kTooFewPatients: return "TooFewPatients";
    case ErrorCode::kBadMagic: return "BadMagic";
    case ErrorCode::kUnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::kTruncatedFile: return "TruncatedFile";
    case ErrorCode::kNonFiniteFeature: return "NonFiniteFeature";
    case ErrorCode::kInvalidSpec: return "InvalidSpec";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kUnreadableImage: return "UnreadableImage";
    case ErrorCode::kEmptyTissue: return "EmptyTissue";
    case ErrorCode::kMagnificationUnavailable: return "MagnificationUnavailable";
    case ErrorCode::kEmptyManifest: return "EmptyManifest";
    case ErrorCode::kOutOfBounds: return "OutOfBounds";
    case ErrorCode::kWeightsNotFound: return "WeightsNotFound";
    case ErrorCode::kDimMismatch: return "DimMismatch";
    case ErrorCode::kUnknownEncoder: return "UnknownEncoder";
    case ErrorCode::kDuplicateEncoder: return "DuplicateEncoder";
    case ErrorCode::kEmptyBag: return "EmptyBag";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kNotSquare: return "NotSquare";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kEmptyClass: return "EmptyClass";
    case ErrorCode::kEmptyTestSet: return "EmptyTestSet";
    case ErrorCode::kAllOneClass: return "AllOneClass";
    case ErrorCode::kEmptyGroup: return "EmptyGroup";
    case ErrorCode::kMissingBags: return "MissingBags";
    case ErrorCode::kEncoderMismatch: return "EncoderMismatch";
    case ErrorCode::kBadCheckpoint: return "BadCheckpoint";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

MilError::MilError(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
      code_(code) {}

}  // namespace milkit
