#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "bvit/data.hpp"

namespace bvit {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitData = 3, kExitDivergence = 4 };

// "cifar100:<dir>" or "synthetic:<spec>"; bad specs raise ConfigError, I/O problems DataError.
DatasetSplit load_data_source(const std::string& source, bool standardize);

// Entry point of the bvit tool. Errors are reported on `err` as one line:
//   error code=<n> kind=<config|data|divergence|failure>: <message>
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bvit
