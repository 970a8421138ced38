#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace uniphynet::cli {

// Exit codes: 0 success, 1 configuration or run failure, 2 usage error.
// args[0] is the program name.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_command(int argc, char** argv);

}  // namespace uniphynet::cli
