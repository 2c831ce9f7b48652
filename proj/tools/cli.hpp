// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "fibro/run_config.hpp"

namespace fibro::cli {

struct ParsedArgs {
  std::string command;
  RunConfig cfg;
  /// Set when the caller asked for help or gave nothing to do; holds the text
  /// to print.
  std::string usage;
  int usage_exit = 0;
};

/// Defaults <- --config file <- flags. Throws fibro::Error with UnknownFlag
/// or BadValue (naming the offending key) on bad input.
ParsedArgs parse_args(const std::vector<std::string>& args);

/// Runs a parsed command. Returns 0 on success, 1 on operational errors.
/// Logs `key=value` lines to `log`.
int run(const ParsedArgs& parsed, std::ostream& log);

/// parse_args + run with exit codes 0/1/2; usage and errors go to `err`.
int main_entry(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// One `key=value ...` line; values containing spaces or quotes are quoted.
void log_line(std::ostream& log, const std::vector<std::pair<std::string, std::string>>& fields);

}  // namespace fibro::cli
