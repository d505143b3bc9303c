#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

namespace dvit::cli {

enum ExitCode { kOk = 0, kUsage = 1, kRuntime = 2 };

/// Every configurable key with its default. Config files and `--set` may
/// only name keys present here.
nlohmann::json default_config();

/// defaults < file < overrides. Override values are parsed as JSON when
/// possible, else taken as strings, and must match the default's type.
nlohmann::json resolve_config(const std::string& file, const std::vector<std::string>& overrides);

/// Entry point behind the `dvit` binary. argv[0] is the program name.
int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace dvit::cli
