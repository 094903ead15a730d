#pragma once

// Run configuration files. TOML and JSON load into the same JSON tree; field
// access records every problem so that one run reports all of them.

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace mixfit::cli {

using Json = nlohmann::ordered_json;

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::vector<std::string>& problems);
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  std::vector<std::string> problems_;
};

class Config {
 public:
  /// Parses by extension: .json as JSON, anything else as TOML. Throws
  /// ConfigError with the line of a syntax error.
  static Config load(const std::string& path);
  static Config from_json(Json root, std::string origin);

  const std::string& path() const { return path_; }
  /// Directory of the config file, for resolving relative data paths.
  std::string directory() const;
  const Json& root() const { return root_; }
  bool has(const std::string& key) const;

  std::int64_t integer(const std::string& key, std::int64_t fallback, std::int64_t min,
                       std::int64_t max);
  std::int64_t required_integer(const std::string& key, std::int64_t min, std::int64_t max);
  double number(const std::string& key, double fallback, double min, double max);
  bool boolean(const std::string& key, bool fallback);
  std::string choice(const std::string& key, const std::string& fallback,
                     const std::set<std::string>& allowed);
  std::string string(const std::string& key, const std::string& fallback);
  std::vector<std::int64_t> integers(const std::string& key, std::vector<std::int64_t> fallback,
                                     std::int64_t min, std::int64_t max);
  std::vector<std::string> strings(const std::string& key, std::vector<std::string> fallback,
                                   const std::set<std::string>& allowed);
  /// Array of tables, each a nested Config sharing this one's error log.
  std::vector<Json> tables(const std::string& key);

  /// Flags keys outside `allowed`.
  void allow_only(const std::set<std::string>& allowed);
  void problem(const std::string& key, const std::string& message);
  /// Throws ConfigError when anything was flagged.
  void finish() const;

 private:
  std::string where(const std::string& key) const;
  const Json* find(const std::string& key) const;

  Json root_;
  std::string path_;
  std::map<std::string, int> lines_;
  std::vector<std::string> problems_;
};

}  // namespace mixfit::cli
