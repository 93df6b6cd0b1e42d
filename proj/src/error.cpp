#include "dyllm/error.hpp"

namespace dyllm {

const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::kShapeMismatch: return "shape mismatch";
        case ErrorCode::kInvalidArgument: return "invalid argument";
        case ErrorCode::kInvalidConfig: return "invalid config";
        case ErrorCode::kIndexOutOfBounds: return "index out of bounds";
        case ErrorCode::kInvalidState: return "invalid state";
        case ErrorCode::kBadMagic: return "bad magic";
        case ErrorCode::kBadVersion: return "bad version";
        case ErrorCode::kUnexpectedEof: return "unexpected end of file";
        case ErrorCode::kIo: return "i/o error";
        case ErrorCode::kDecodingComplete: return "decoding complete";
        case ErrorCode::kSamplerExhausted: return "sampler exhausted";
    }
    return "unknown";
}

}  // namespace dyllm
