// SPDX-License-Identifier: Apache-2.0
#ifndef PLGDF_CONFIG_HPP
#define PLGDF_CONFIG_HPP

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "plgdf/trainer.hpp"

namespace plgdf {

// Flat `key = value` text, one pair per line, # comments. Keys mirror
// TrainConfig field names exactly; unknown keys are hard errors.
std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

// Applies file values then overrides (key=value strings), key by key.
// Throws ConfigError listing every unknown key or unparsable value.
TrainConfig make_train_config(const std::map<std::string, std::string>& file_values,
                              const std::vector<std::string>& overrides);

// The resolved key/value view of a config, suitable for re-running
// bit-identically (written into every run directory).
std::map<std::string, std::string> config_to_map(const TrainConfig& cfg);
std::string config_to_text(const TrainConfig& cfg);

extern const char* const kVersion;

}  // namespace plgdf

#endif  // PLGDF_CONFIG_HPP
