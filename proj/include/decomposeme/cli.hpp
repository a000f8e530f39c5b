#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace decomposeme {

/// Runs one command line (args[0] is the program name). Results go to `out`,
/// diagnostics to `err`. Returns 0 on success, 1 on usage or validation
/// errors, 2 on runtime failures (I/O, format, divergence).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Git blob hash: SHA-1 over "blob <size>\0" followed by the content.
std::string git_blob_sha1(std::string_view content);

}  // namespace decomposeme
