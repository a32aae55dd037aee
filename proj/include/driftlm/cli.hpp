#pragma once

#include <iosfwd>

namespace driftlm {

// Exit codes: 0 success, 1 runtime failure (including failed verify checks), 2 usage error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace driftlm
