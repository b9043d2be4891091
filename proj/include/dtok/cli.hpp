#ifndef DTOK_CLI_HPP
#define DTOK_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

// Command dispatch for the dtok binary. Exit codes: 0 success, 1 usage error
// (usage text goes to the error stream), 2 runtime failure.

namespace dtok::cli {

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace dtok::cli

#endif  // DTOK_CLI_HPP
