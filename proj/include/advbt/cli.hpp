#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace advbt {

inline constexpr const char* kVersion = "0.1.0";

// Exit codes besides 0 and 1 (any error).
inline constexpr int kExitUsage = 2;
inline constexpr int kExitInterrupted = 3;
inline constexpr int kExitPartial = 4;  // sweep finished but some cells failed

// Entry point for `advbt <command> ...`; args exclude the program name.
// Failures print one line `error: <kind>: <message>` to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace advbt
