#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace senseloop::cli {

enum ExitCode { ok = 0, validation = 2, backend = 3, cassette_miss = 4 };

/// Effective settings: built-in defaults, then the config file, then
/// environment variables (SENSELOOP_BASE_URL, SENSELOOP_API_KEY or
/// OPENAI_API_KEY, SENSELOOP_MODEL, SENSELOOP_DATA_DIR). Flags win over all.
nlohmann::json default_settings();
nlohmann::json load_settings(const std::string& config_path);

/// Runs one command line (args exclude the program name). Errors are
/// reported on `err` as one JSON line and mapped to an exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace senseloop::cli
