#ifndef MILKIT_CLI_HPP_
#define MILKIT_CLI_HPP_

#include <ostream>
#include <string>
#include <vector>

namespace milkit {

// Exit codes: 0 success, 1 usage error, 2 runtime error. args excludes the
// program name.
int cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace milkit

#endif  // MILKIT_CLI_HPP_
