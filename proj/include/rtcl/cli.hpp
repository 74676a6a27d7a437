#pragma once

#include <string>
#include <vector>

namespace rtcl {

// Command-line entry point. args excludes the program name. Returns 0 on
// success, 2 on usage/validation errors, 1 on runtime failures.
int run_cli(std::vector<std::string> args);

}  // namespace rtcl
