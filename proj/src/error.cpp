#include "fsml/error.hpp"

namespace fsml {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::Dimension: return "dimension";
    case ErrorCode::Index: return "index";
    case ErrorCode::Contract: return "contract";
    case ErrorCode::Configuration: return "configuration";
    case ErrorCode::Format: return "format";
    case ErrorCode::Io: return "io";
    case ErrorCode::Sampling: return "sampling";
    case ErrorCode::Conditioning: return "conditioning";
    case ErrorCode::Load: return "load";
    case ErrorCode::Gate: return "gate";
  }
  return "unknown";
}

}  // namespace fsml
