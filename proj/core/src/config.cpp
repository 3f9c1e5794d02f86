// SPDX-License-Identifier: Apache-2.0
#include "plgdf/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>

#include "plgdf/errors.hpp"

namespace plgdf {

const char* const kVersion = "plgdf 0.1.0";

namespace {

std::string trim(std::string s) {
  s.erase(0, s.find_first_not_of(" \t"));
  s.erase(s.find_last_not_of(" \t\r") + 1);
  return s;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw std::invalid_argument("expected a boolean, got '" + v + "'");
}

std::array<std::int64_t, 3> parse_shape(const std::string& v) {
  std::string s = v;
  for (auto& c : s)
    if (c == ',') c = ' ';
  std::istringstream ss(s);
  std::array<std::int64_t, 3> out{};
  if (!(ss >> out[0])) throw std::invalid_argument("expected 1 or 3 integers, got '" + v + "'");
  if (!(ss >> out[1])) {
    out[1] = out[2] = out[0];  // single value means cubic
    return out;
  }
  if (!(ss >> out[2])) throw std::invalid_argument("expected 1 or 3 integers, got '" + v + "'");
  std::string rest;
  if (ss >> rest) throw std::invalid_argument("trailing tokens in shape '" + v + "'");
  return out;
}

std::string shape_to_string(const std::array<std::int64_t, 3>& s) {
  std::ostringstream ss;
  ss << s[0] << "," << s[1] << "," << s[2];
  return ss.str();
}

using Setter = std::function<void(TrainConfig&, const std::string&)>;
using Getter = std::function<std::string(const TrainConfig&)>;

struct Field {
  Setter set;
  Getter get;
};

std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

const std::map<std::string, Field>& field_table() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    auto dbl = [&t](const std::string& k, double TrainConfig::*m) {
      t[k] = {[m](TrainConfig& c, const std::string& v) { c.*m = std::stod(v); },
              [m](const TrainConfig& c) { return fmt_double(c.*m); }};
    };
    auto i64 = [&t](const std::string& k, std::int64_t TrainConfig::*m) {
      t[k] = {[m](TrainConfig& c, const std::string& v) { c.*m = std::stoll(v); },
              [m](const TrainConfig& c) { return std::to_string(c.*m); }};
    };
    auto bol = [&t](const std::string& k, bool TrainConfig::*m) {
      t[k] = {[m](TrainConfig& c, const std::string& v) { c.*m = parse_bool(v); },
              [m](const TrainConfig& c) { return (c.*m) ? "true" : "false"; }};
    };
    auto str = [&t](const std::string& k, std::string TrainConfig::*m) {
      t[k] = {[m](TrainConfig& c, const std::string& v) { c.*m = v; },
              [m](const TrainConfig& c) { return c.*m; }};
    };
    auto shp = [&t](const std::string& k, std::array<std::int64_t, 3> TrainConfig::*m) {
      t[k] = {[m](TrainConfig& c, const std::string& v) { c.*m = parse_shape(v); },
              [m](const TrainConfig& c) { return shape_to_string(c.*m); }};
    };
    dbl("lr", &TrainConfig::lr);
    str("lr_schedule", &TrainConfig::lr_schedule);
    dbl("momentum", &TrainConfig::momentum);
    dbl("weight_decay", &TrainConfig::weight_decay);
    i64("labeled_per_batch", &TrainConfig::labeled_per_batch);
    i64("unlabeled_per_batch", &TrainConfig::unlabeled_per_batch);
    i64("t_max", &TrainConfig::t_max);
    shp("patch_shape", &TrainConfig::patch_shape);
    dbl("sharpen_T", &TrainConfig::sharpen_T);
    dbl("consis_w", &TrainConfig::consis_w);
    dbl("ema_decay", &TrainConfig::ema_decay);
    dbl("mix_alpha", &TrainConfig::mix_alpha);
    dbl("noise_sigma", &TrainConfig::noise_sigma);
    dbl("noise_clip", &TrainConfig::noise_clip);
    bol("enable_semi", &TrainConfig::enable_semi);
    bol("enable_mix", &TrainConfig::enable_mix);
    bol("enable_consis", &TrainConfig::enable_consis);
    bol("enable_sharp", &TrainConfig::enable_sharp);
    bol("semi_rampup", &TrainConfig::semi_rampup);
    str("consis_norm", &TrainConfig::consis_norm);
    str("consis_d_term", &TrainConfig::consis_d_term);
    t["seed"] = {[](TrainConfig& c, const std::string& v) { c.seed = std::stoull(v); },
                 [](const TrainConfig& c) { return std::to_string(c.seed); }};
    i64("validation_interval", &TrainConfig::validation_interval);
    i64("scale_count", &TrainConfig::scale_count);
    i64("in_channels", &TrainConfig::in_channels);
    i64("base_filters", &TrainConfig::base_filters);
    i64("depth", &TrainConfig::depth);
    shp("val_stride", &TrainConfig::val_stride);
    i64("prefetch_workers", &TrainConfig::prefetch_workers);
    return t;
  }();
  return table;
}

}  // namespace

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected 'key = value', got '" + line + "'");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

TrainConfig make_train_config(const std::map<std::string, std::string>& file_values,
                              const std::vector<std::string>& overrides) {
  const auto& table = field_table();
  TrainConfig cfg;
  std::vector<std::string> unknown, bad;

  auto apply = [&](const std::string& key, const std::string& value) {
    auto it = table.find(key);
    if (it == table.end()) {
      unknown.push_back(key);
      return;
    }
    try {
      it->second.set(cfg, value);
    } catch (const std::exception& e) {
      bad.push_back(key + " = '" + value + "' (" + e.what() + ")");
    }
  };

  for (const auto& [k, v] : file_values) apply(k, v);
  for (const auto& kv : overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) {
      bad.push_back("override '" + kv + "' is not key=value");
      continue;
    }
    apply(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }

  if (!unknown.empty() || !bad.empty()) {
    std::string msg = "config errors:";
    for (const auto& k : unknown) msg += "\n  unknown key: " + k;
    for (const auto& b : bad) msg += "\n  bad value: " + b;
    throw ConfigError(msg);
  }
  cfg.validate();
  return cfg;
}

std::map<std::string, std::string> config_to_map(const TrainConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& [key, field] : field_table()) out[key] = field.get(cfg);
  return out;
}

std::string config_to_text(const TrainConfig& cfg) {
  std::ostringstream ss;
  for (const auto& [key, value] : config_to_map(cfg)) ss << key << " = " << value << "\n";
  return ss.str();
}

}  // namespace plgdf
