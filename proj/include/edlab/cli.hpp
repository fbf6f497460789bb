#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace edlab::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kFailed = 1;      // an error was raised
inline constexpr int kUsage = 2;       // bad command line
inline constexpr int kInvariant = 3;   // artifacts written but a hard invariant failed

// Runs one subcommand. args excludes the program name, e.g.
// {"edit", "--config", "exp.json", "--override", "edit.batch_size=32"}.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace edlab::cli
