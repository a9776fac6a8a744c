#pragma once

#include <ostream>

namespace snapmmd {

inline constexpr const char* kVersion = "0.1.0";

// Command-line entry point. Returns the process exit status: 0 on success,
// 1 on a runtime failure, 2 on a usage or configuration error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace snapmmd
