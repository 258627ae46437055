#pragma once

#include <ostream>

namespace bevfuse::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kArtifact = 3,  // missing input or hash mismatch
  kDivergence = 4,
  kGradCheck = 5,
};

// Runs one subcommand. argv[0] is the program name.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace bevfuse::cli
