#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace crosslink {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Flat `key = value` text. Blank lines and lines starting with '#' are
/// skipped; keys may repeat only in files meant as lists (see entries()).
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, std::string_view origin = "<string>");
  static KeyValueConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;

  std::string get_string(const std::string& key, std::string fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Throws ConfigError naming the first key outside `known`.
  void require_known(const std::set<std::string>& known) const;

  /// Every (key, value) in file order, duplicates included.
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  const std::string& origin() const { return origin_; }

 private:
  std::string origin_;
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
  std::vector<std::pair<std::string, std::string>> entries_;
};

// Strict numeric parsing helpers shared with the command-line front end.
double parse_double(std::string_view text, std::string_view what);
std::int64_t parse_int(std::string_view text, std::string_view what);
std::uint64_t parse_uint(std::string_view text, std::string_view what);
bool parse_bool(std::string_view text, std::string_view what);
std::vector<std::string> split(std::string_view text, char delimiter);
std::string trim(std::string_view text);
/// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace crosslink
