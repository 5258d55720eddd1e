#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mad::cli {

// Runs one `mad` invocation; `args` excludes the program name. Returns the
// process exit code: 0 success, 1 usage error, 2 runtime error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mad::cli
