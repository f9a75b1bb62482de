#ifndef MILKIT_ERROR_HPP_
#define MILKIT_ERROR_HPP_

#include <stdexcept>
#include <string>
#include <string_view>

namespace milkit {

enum class ErrorCode {
  kDuplicateSlideId,
  kUnknownClass,
  kEmptyIndex,
  kInvalidFractions,
  kTooFewPatients,
  kBadMagic,
  kUnsupportedVersion,
  kTruncatedFile,
  kNonFiniteFeature,
  kInvalidSpec,
  kIoError,
  kUnreadableImage,
  kEmptyTissue,
  kMagnificationUnavailable,
  kEmptyManifest,
  kOutOfBounds,
  kWeightsNotFound,
  kDimMismatch,
  kUnknownEncoder,
  kDuplicateEncoder,
  kEmptyBag,
  kShapeMismatch,
  kNotSquare,
  kNonFinite,
  kNonFiniteLoss,
  kEmptyClass,
  kEmptyTestSet,
  kAllOneClass,
  kEmptyGroup,
  kMissingBags,
  kEncoderMismatch,
  kBadCheckpoint,
  kInvalidArgument,
};

std::string_view error_code_name(ErrorCode code);

// All library failures surface as this exception; `code()` identifies the
// contract violation, `what()` carries the context.
class MilError : public std::runtime_error {
 public:
  MilError(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace milkit

#endif  // MILKIT_ERROR_HPP_
