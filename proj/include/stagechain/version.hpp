#pragma once

namespace stagechain {
inline constexpr const char* kToolName = "stagechain";
inline constexpr const char* kToolVersion = "0.1.0";
}  // namespace stagechain
