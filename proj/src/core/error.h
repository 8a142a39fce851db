#pragma once

#include <stdexcept>
#include <string>

namespace svcforge {

enum class ErrorCode {
  kIo = 1,
  kEmptyInput,
  kConfig,
  kContract,
  kEncoderUnavailable,
  kNoVoicedFrames,
  kDegenerateStats,
  kUnknownSpeaker,
  kCheckpoint,
  kDiverged,
  kInternal,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::kIo: return "io";
    case ErrorCode::kEmptyInput: return "empty_input";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kContract: return "contract";
    case ErrorCode::kEncoderUnavailable: return "encoder_unavailable";
    case ErrorCode::kNoVoicedFrames: return "no_voiced_frames";
    case ErrorCode::kDegenerateStats: return "degenerate_stats";
    case ErrorCode::kUnknownSpeaker: return "unknown_speaker";
    case ErrorCode::kCheckpoint: return "checkpoint";
    case ErrorCode::kDiverged: return "diverged";
    case ErrorCode::kInternal: return "internal";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

inline void require(bool cond, ErrorCode code, const std::string& msg) {
  if (!cond) raise(code, msg);
}

}  // namespace svcforge
