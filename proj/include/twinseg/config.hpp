#pragma once

#include <string>
#include <vector>

#include "twinseg/train.hpp"

namespace twinseg {

/// Names accepted by preset_config.
std::vector<std::string> preset_names();
/// Throws ConfigError for an unknown name.
RunConfig preset_config(const std::string& name);

/// Nested JSON text <-> RunConfig. Unknown keys are rejected; missing keys
/// keep the values of `base`.
std::string config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const std::string& text, const RunConfig& base = RunConfig{});
RunConfig load_config_file(const std::string& path, const RunConfig& base = RunConfig{});

/// Applies "a.b.c=value" overrides. The path must name an existing field;
/// the value is read as a JSON literal, or as a string if that fails.
RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& overrides);

}  // namespace twinseg
