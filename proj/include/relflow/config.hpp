#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "relflow/core/error.hpp"

namespace relflow {

/// Plain-text configuration:
///
///   # comment
///   seed = 7
///   [grpo]
///   group_size = 8
///
/// Keys before the first section header belong to the global section "". Keys are addressed as
/// "section.key" (or just "key" for globals). Duplicate keys and unknown keys are errors.
class ConfigFile {
 public:
  static ConfigFile parse(std::string_view text, std::string_view origin = "<config>") {
    ConfigFile cfg;
    std::string section;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      const std::string s = trim(line);
      if (s.empty()) continue;
      const std::string where = std::string(origin) + ":" + std::to_string(lineno);
      if (s.front() == '[') {
        if (s.back() != ']' || s.size() < 3) throw ConfigError(where + ": malformed section header");
        section = trim(s.substr(1, s.size() - 2));
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
      const std::string key = trim(s.substr(0, eq));
      if (key.empty()) throw ConfigError(where + ": empty key");
      const std::string full = section.empty() ? key : section + "." + key;
      if (!cfg.values_.emplace(full, trim(s.substr(eq + 1))).second)
        throw ConfigError(where + ": duplicate key '" + full + "'");
    }
    return cfg;
  }

  static ConfigFile load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str(), path);
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  /// Throws unless every key is in `known`.
  void require_known(const std::set<std::string>& known) const {
    for (const auto& [k, v] : values_)
      if (!known.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }

  template <typename T>
  void read(const std::string& key, T& out) const {
    auto it = values_.find(key);
    if (it == values_.end()) return;
    out = convert<T>(key, it->second);
  }

  template <typename T>
  static T convert(const std::string& key, const std::string& v) {
    if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (v == "true" || v == "1" || v == "yes") return true;
      if (v == "false" || v == "0" || v == "no") return false;
      throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
    } else {
      T out{};
      const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
      if (res.ec != std::errc() || res.ptr != v.data() + v.size())
        throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
      return out;
    }
  }

 private:
  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
  }

  std::map<std::string, std::string> values_;
};

}  // namespace relflow
