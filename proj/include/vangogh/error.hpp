#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vangogh {

enum class Errc {
  missing_directory,
  missing_frames,
  undecodable_frame,
  inconsistent_dimensions,
  unwritable_path,
  invalid_dimensions,
  shape_mismatch,
  not_grayscale,
  prompt_too_long,
  shape_incompatible,
  invalid_timestep,
  out_of_range,
  clip_too_short,
  data_exhausted,
  non_finite_loss,
  non_positive_fvmd,
  invalid_argument,
  io_error,
  bad_checkpoint,
};

constexpr std::string_view errc_name(Errc c) noexcept {
  switch (c) {
    case Errc::missing_directory: return "MissingDirectory";
    case Errc::missing_frames: return "MissingFrames";
    case Errc::undecodable_frame: return "UndecodableFrame";
    case Errc::inconsistent_dimensions: return "InconsistentDimensions";
    case Errc::unwritable_path: return "UnwritablePath";
    case Errc::invalid_dimensions: return "InvalidDimensions";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::not_grayscale: return "NotGrayscale";
    case Errc::prompt_too_long: return "PromptTooLong";
    case Errc::shape_incompatible: return "ShapeIncompatible";
    case Errc::invalid_timestep: return "InvalidTimestep";
    case Errc::out_of_range: return "OutOfRange";
    case Errc::clip_too_short: return "ClipTooShort";
    case Errc::data_exhausted: return "DataExhausted";
    case Errc::non_finite_loss: return "NonFiniteLoss";
    case Errc::non_positive_fvmd: return "NonPositiveFvmd";
    case Errc::invalid_argument: return "InvalidArgument";
    case Errc::io_error: return "IoError";
    case Errc::bad_checkpoint: return "BadCheckpoint";
  }
  return "Unknown";
}

// All library failures are reported through this one exception type; the
// code lets callers (CLI exit codes, HTTP status mapping, tests) branch on it.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace vangogh
