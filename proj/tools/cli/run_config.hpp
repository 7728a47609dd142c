#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

namespace vrwkv::cli {

/// Fills every option of `app` that was not given on the command line from a
/// flat JSON object whose keys are long option names without the dashes.
/// Unknown keys and nested values throw CLI::ValidationError.
void apply_config_file(CLI::App& app, const std::filesystem::path& path);

/// Flat JSON object of every option that has a value (given, loaded from a
/// config file, or defaulted). Replaying it through apply_config_file
/// reproduces the run. `--config`, `--out` and `--help` are left out.
nlohmann::json resolved_config(const CLI::App& app);

/// "1,2,8" -> {1, 2, 8}. Throws CLI::ValidationError on bad input.
std::vector<std::size_t> parse_size_list(const std::string& text);

}  // namespace vrwkv::cli
