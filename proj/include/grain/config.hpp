#pragma once

// Layered configuration (defaults < file < environment < command line) and
// run manifests.
//
// Keys are dotted paths into the config's JSON form ("batch_size",
// "model.encoder_dim"). Environment variables are GRAIN_<PATH> with dots
// written as double underscores: GRAIN_BATCH_SIZE, GRAIN_MODEL__ENCODER_DIM.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "grain/annotation.hpp"
#include "grain/digest.hpp"
#include "grain/errors.hpp"
#include "grain/training.hpp"

extern char** environ;

namespace grain {

#ifndef GRAIN_VERSION
#define GRAIN_VERSION "0.0.0"
#endif

inline constexpr const char* kVersion = GRAIN_VERSION;
inline constexpr const char* kEnvPrefix = "GRAIN_";

using KeyValues = std::vector<std::pair<std::string, std::string>>;

struct ConfigSources {
  nlohmann::json file = nlohmann::json::object();
  KeyValues env;  // (dotted key, raw value)
  KeyValues cli;  // (dotted key, raw value)
};

inline nlohmann::json load_config_file(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config file " + path + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file " + path + " must hold a JSON object");
  return j;
}

// GRAIN_FOO__BAR=1 -> ("foo.bar", "1"). Only variables with the prefix are
// returned.
inline KeyValues env_overrides(char** envp = environ) {
  KeyValues out;
  const std::string prefix = kEnvPrefix;
  for (char** e = envp; e && *e; ++e) {
    const std::string entry = *e;
    const auto eq = entry.find('=');
    if (eq == std::string::npos || !entry.starts_with(prefix)) continue;
    std::string key = entry.substr(prefix.size(), eq - prefix.size());
    std::string path;
    for (std::size_t i = 0; i < key.size(); ++i) {
      if (key[i] == '_' && i + 1 < key.size() && key[i + 1] == '_') {
        path += '.';
        ++i;
      } else {
        path += static_cast<char>(std::tolower(static_cast<unsigned char>(key[i])));
      }
    }
    out.emplace_back(path, entry.substr(eq + 1));
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace config_detail {

inline std::string join(const std::string& prefix, const std::string& key) { return prefix.empty() ? key : prefix + "." + key; }

// Overlays `layer` onto `base`, rejecting keys absent from `base` and values
// whose JSON type does not fit.
inline void overlay(nlohmann::json& base, const nlohmann::json& layer, const std::string& where, const std::string& prefix) {
  for (const auto& [key, value] : layer.items()) {
    const auto path = join(prefix, key);
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "' in " + where);
    auto& target = base[key];
    if (target.is_object()) {
      if (!value.is_object()) throw ConfigError("config key '" + path + "' in " + where + " must be an object");
      overlay(target, value, where, path);
      continue;
    }
    const bool ok = (target.is_number_integer() && value.is_number_integer()) ||
                    (target.is_number_float() && value.is_number()) || (target.is_boolean() && value.is_boolean()) ||
                    (target.is_string() && value.is_string());
    if (!ok) throw ConfigError("config key '" + path + "' in " + where + " has the wrong type");
    target = value;
  }
}

inline nlohmann::json parse_scalar(const nlohmann::json& like, const std::string& path, const std::string& raw,
                                   const std::string& where) {
  if (like.is_string()) return raw;
  if (like.is_boolean()) {
    std::string v = raw;
    for (auto& c : v) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError("config key '" + path + "' from " + where + " expects a boolean, got '" + raw + "'");
  }
  nlohmann::json v;
  try {
    v = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + path + "' from " + where + " expects a number, got '" + raw + "'");
  }
  if (like.is_number_integer() && !v.is_number_integer())
    throw ConfigError("config key '" + path + "' from " + where + " expects an integer, got '" + raw + "'");
  if (!v.is_number()) throw ConfigError("config key '" + path + "' from " + where + " expects a number, got '" + raw + "'");
  return v;
}

// Turns dotted key/value strings into a nested JSON layer typed after `base`.
inline nlohmann::json layer_from_pairs(const nlohmann::json& base, const KeyValues& pairs, const std::string& where) {
  nlohmann::json layer = nlohmann::json::object();
  for (const auto& [path, raw] : pairs) {
    const nlohmann::json* node = &base;
    nlohmann::json* out = &layer;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const auto key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->is_object() || !node->contains(key)) throw ConfigError("unknown config key '" + path + "' from " + where);
      node = &(*node)[key];
      if (dot == std::string::npos) {
        if (node->is_object()) throw ConfigError("config key '" + path + "' from " + where + " names a section, not a value");
        (*out)[key] = parse_scalar(*node, path, raw, where);
        break;
      }
      if (!out->contains(key)) (*out)[key] = nlohmann::json::object();
      out = &(*out)[key];
      start = dot + 1;
    }
  }
  return layer;
}

}  // namespace config_detail

// Defaults overlaid with file, environment and command line, in that order.
inline nlohmann::json resolve_json(nlohmann::json defaults, const ConfigSources& sources) {
  config_detail::overlay(defaults, sources.file, "config file", "");
  config_detail::overlay(defaults, config_detail::layer_from_pairs(defaults, sources.env, "environment"), "environment", "");
  config_detail::overlay(defaults, config_detail::layer_from_pairs(defaults, sources.cli, "command line"), "command line", "");
  return defaults;
}

inline ModelConfig preset_model(const std::string& preset) {
  if (preset == "tiny") return ModelConfig::tiny();
  if (preset == "base") return ModelConfig{};
  throw ConfigError("unknown preset '" + preset + "' (expected tiny or base)");
}

// The preset picks the model defaults; individual model keys still override.
inline TrainConfig resolve_train_config(const ConfigSources& sources) {
  std::string preset = TrainConfig{}.preset;
  if (sources.file.contains("preset") && sources.file["preset"].is_string()) preset = sources.file["preset"].get<std::string>();
  for (const auto* layer : {&sources.env, &sources.cli})
    for (const auto& [k, v] : *layer)
      if (k == "preset") preset = v;
  TrainConfig defaults;
  defaults.preset = preset;
  defaults.model = preset_model(preset);
  const auto resolved = resolve_json(nlohmann::json(defaults), sources).get<TrainConfig>();
  resolved.validate();
  return resolved;
}

inline void to_json(nlohmann::json& j, const AnnotateConfig& c) {
  j = {{"conf_threshold", c.conf_threshold},
       {"nms_iou", c.nms_iou},
       {"retries", c.retry.retries},
       {"retry_delay_s", c.retry.initial_delay_s},
       {"retry_multiplier", c.retry.multiplier},
       {"workers", c.workers}};
}

inline void from_json(const nlohmann::json& j, AnnotateConfig& c) {
  c.conf_threshold = j.value("conf_threshold", c.conf_threshold);
  c.nms_iou = j.value("nms_iou", c.nms_iou);
  c.retry.retries = j.value("retries", c.retry.retries);
  c.retry.initial_delay_s = j.value("retry_delay_s", c.retry.initial_delay_s);
  c.retry.multiplier = j.value("retry_multiplier", c.retry.multiplier);
  c.workers = j.value("workers", c.workers);
}

inline AnnotateConfig resolve_annotate_config(const ConfigSources& sources) {
  const auto c = resolve_json(nlohmann::json(AnnotateConfig{}), sources).get<AnnotateConfig>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Run manifests

inline std::string utc_timestamp(std::chrono::system_clock::time_point t = std::chrono::system_clock::now()) {
  const auto secs = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config = nlohmann::json::object();
  std::string version = kVersion;
  std::uint64_t seed = 0;
  std::string started_at;
  std::string finished_at;
  std::map<std::string, std::string> input_digests;
  std::map<std::string, std::string> output_digests;
  int exit_code = 0;
  std::string error;

  // Files are digested directly; a directory is digested through its
  // sorted regular files.
  static std::string digest_path(const std::string& path) {
    namespace fs = std::filesystem;
    if (fs::is_directory(path)) {
      std::vector<std::string> files;
      for (const auto& e : fs::recursive_directory_iterator(path))
        if (e.is_regular_file()) files.push_back(e.path().string());
      std::sort(files.begin(), files.end());
      std::string combined;
      for (const auto& f : files) combined += fs::relative(f, path).generic_string() + ":" + digest_file(f) + "\n";
      return digest_string(combined);
    }
    return digest_file(path);
  }

  void add_input(const std::string& path) { input_digests[path] = digest_path(path); }
  void add_output(const std::string& path) {
    if (std::filesystem::exists(path)) output_digests[path] = digest_path(path);
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["argv"] = argv;
    j["version"] = version;
    j["seed"] = seed;
    j["config"] = config;
    j["started_at"] = started_at;
    j["finished_at"] = finished_at;
    j["input_digests"] = input_digests;
    j["output_digests"] = output_digests;
    j["exit_code"] = exit_code;
    if (!error.empty()) j["error"] = error;
    return j;
  }

  void write(const std::string& path) const {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write manifest " + path);
    out << to_json().dump(2) << '\n';
  }

  static RunManifest read(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open manifest " + path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("malformed manifest " + path + ": " + e.what());
    }
    RunManifest m;
    m.command = j.value("command", std::string());
    m.argv = j.value("argv", std::vector<std::string>{});
    m.config = j.value("config", nlohmann::json::object());
    m.version = j.value("version", std::string());
    m.seed = j.value("seed", std::uint64_t{0});
    m.started_at = j.value("started_at", std::string());
    m.finished_at = j.value("finished_at", std::string());
    m.input_digests = j.value("input_digests", std::map<std::string, std::string>{});
    m.output_digests = j.value("output_digests", std::map<std::string, std::string>{});
    m.exit_code = j.value("exit_code", 0);
    m.error = j.value("error", std::string());
    return m;
  }
};

}  // namespace grain
