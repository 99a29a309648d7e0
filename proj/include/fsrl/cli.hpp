#pragma once

#include <string>
#include <vector>

namespace fsrl {

// Exit codes: 0 success, 2 usage error (unknown subcommand or flag),
// 3 invalid configuration, 4 missing/corrupt file or checkpoint,
// 5 training/runtime failure, 1 anything else.
enum ExitCode : int {
  kExitOk = 0,
  kExitOther = 1,
  kExitUsage = 2,
  kExitConfig = 3,
  kExitIo = 4,
  kExitRuntime = 5,
};

// Dispatches one subcommand; args excludes the program name.
int cli_dispatch(const std::vector<std::string>& args);

}  // namespace fsrl
