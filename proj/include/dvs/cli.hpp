#pragma once

namespace dvs {

// Command-line entry point, linked into the library so tests can drive it
// in-process. argv[0] is the program name, as in main. Returns the process
// exit code: 0 on success, 1 on runtime failure, 2 on usage errors.
int run_cli(int argc, const char* const* argv);

}  // namespace dvs
