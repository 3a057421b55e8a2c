#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "mtuda/data.hpp"

namespace mtuda {

/// Parses the TOML subset used by run configs into a JSON tree:
/// `[section]` and dotted `[a.b]` headers, `[[array.of.tables]]`,
/// `key = value` with numbers, booleans, "strings" and flat [arrays],
/// and `#` comments. Errors carry `origin` and the line number.
nlohmann::json parse_config_text(const std::string& text, const std::string& origin = "<config>");
nlohmann::json load_config_file(const std::filesystem::path& path);

/// Inverse of parse_config_text for the trees it produces.
std::string format_config_text(const nlohmann::json& tree);

/// The [synthetic] section; missing keys keep their defaults.
SyntheticConfig synthetic_from_json(const nlohmann::json& j);
nlohmann::json synthetic_to_json(const SyntheticConfig& c);

}  // namespace mtuda
