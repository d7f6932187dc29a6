#pragma once

#include <string>
#include <vector>

namespace draft {

/// Runs one subcommand. Returns 0 on success, 1 on runtime errors and 2 on
/// usage errors (bad flags, unknown config keys).
int cli_main(int argc, const char* const* argv);
int cli_main(const std::vector<std::string>& args);

}  // namespace draft
