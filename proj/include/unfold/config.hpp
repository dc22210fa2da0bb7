#pragma once

// Run configuration: one flat JSON file per command, with command-line
// overrides taking precedence. Unknown keys are rejected by name.

#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "unfold/numerics.hpp"

namespace unfold::config {

using nlohmann::json;

struct RunConfig {
  json values = json::object();

  bool has(const std::string& key) const { return values.contains(key); }

  template <class T>
  T get(const std::string& key, const T& fallback) const {
    if (!values.contains(key)) return fallback;
    return values.at(key).get<T>();
  }
  template <class T>
  T get_required(const std::string& key) const {
    if (!values.contains(key))
      throw std::invalid_argument("config: missing required key '" + key + "'");
    return values.at(key).get<T>();
  }

  /// Global seed with the UNFOLD_SEED environment fallback.
  std::uint64_t seed() const {
    if (values.contains("seed")) return values.at("seed").get<std::uint64_t>();
    if (const char* env = std::getenv("UNFOLD_SEED")) return std::strtoull(env, nullptr, 10);
    return 0;
  }
};

/// Merge a JSON config file with `key=value` overrides; every key must be in
/// the allowed set. Override values are parsed as JSON when possible and fall
/// back to strings.
inline RunConfig load_config(const std::string& path,
                             const std::vector<std::pair<std::string, std::string>>& overrides,
                             const std::set<std::string>& allowed_keys) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    json parsed;
    try {
      parsed = json::parse(f);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("config: malformed JSON in " + path + ": " + e.what());
    }
    if (!parsed.is_object()) throw std::runtime_error("config: top level must be an object");
    cfg.values = std::move(parsed);
  }
  for (const auto& [key, raw] : overrides) {
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;  // plain string
    }
    cfg.values[key] = value;
  }
  for (const auto& [key, value] : cfg.values.items()) {
    (void)value;
    if (!allowed_keys.contains(key))
      throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  return cfg;
}

}  // namespace unfold::config
