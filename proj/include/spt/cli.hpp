#pragma once
// `sptlab` command line. Exit codes: 0 ok, 1 config or usage error,
// 2 runtime error, 3 verification failure.

#include <iosfwd>
#include <string>
#include <vector>

namespace spt {

inline constexpr int kExitOk = 0, kExitConfig = 1, kExitRuntime = 2, kExitVerify = 3;

// args excludes the program name.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace spt
