#pragma once

namespace stagechain::cli {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitMissing = 3;

// Entry point of the stagechain command; returns the exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace stagechain::cli
