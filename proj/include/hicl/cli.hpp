#pragma once

#include <iosfwd>

namespace hicl {

/// Entry point of the `hicl` tool. Returns 0 on success, 1 on usage errors and
/// 2 on data, config, checkpoint or I/O errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace hicl
