#pragma once

#include <stdexcept>
#include <string>

namespace dyllm {

enum class ErrorCode {
    kShapeMismatch,
    kInvalidArgument,
    kInvalidConfig,
    kIndexOutOfBounds,
    kInvalidState,
    kBadMagic,
    kBadVersion,
    kUnexpectedEof,
    kIo,
    kDecodingComplete,
    kSamplerExhausted,
};

const char* to_string(ErrorCode code);

// Every library failure surfaces as this exception; `code()` is the stable
// discriminator, `what()` carries the human-readable detail.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace dyllm
